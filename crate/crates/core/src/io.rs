//! File formats: the `.fmap` binary feature map, JSON mask pyramids and mask
//! lists, JSON configuration, and binary PGM label maps.
//!
//! `.fmap` layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FMAP"
//! 4       4     version (u32) = 1
//! 8       4     height (u32)
//! 12      4     width (u32)
//! 16      4     dim (u32)
//! 20      4     dtype (u32), 0 = f32
//! 24      ...   height*width*dim f32 values, row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TokenMask;
use crate::maskops::{rle_decode, rle_encode, RleMask};
use crate::pooling::{MaskKind, MaskPyramid, PseudoMask, PyramidLevel, UniapConfig};
use crate::querysd::QuerySdConfig;
use crate::tensor::FeatureMap;

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u32 = 1;
pub const FMAP_DTYPE_F32: u32 = 0;
pub const FMAP_HEADER_LEN: usize = 24;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn fmap_to_bytes(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(FMAP_HEADER_LEN + 4 * fm.data().len());
    out.extend_from_slice(&FMAP_MAGIC);
    for v in [
        FMAP_VERSION,
        fm.height() as u32,
        fm.width() as u32,
        fm.dim() as u32,
        FMAP_DTYPE_F32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in fm.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn fmap_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < FMAP_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: FMAP_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FMAP_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap());
    let version = word(1);
    if version != FMAP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (height, width, dim) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let dtype = word(5);
    if dtype != FMAP_DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let payload = &bytes[FMAP_HEADER_LEN..];
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(dim))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidParams(format!("fmap shape {height}x{width}x{dim} overflows")))?;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMap::new(height, width, dim, data)
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    fmap_from_bytes(&read_bytes(path.as_ref())?)
}

pub fn write_fmap(fm: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &fmap_to_bytes(fm))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRecord {
    rle: Vec<usize>,
    area: usize,
    level: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelRecord {
    tau: f64,
    instance: Vec<MaskRecord>,
    semantic: Vec<MaskRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PyramidRecord {
    height: usize,
    width: usize,
    levels: Vec<LevelRecord>,
}

fn decode_mask(counts: Vec<usize>, area: usize, height: usize, width: usize) -> Result<TokenMask> {
    let mask = rle_decode(&RleMask {
        height,
        width,
        counts,
    })?;
    if mask.area() != area {
        return Err(Error::MalformedJson(format!(
            "mask area field {area} disagrees with decoded area {}",
            mask.area()
        )));
    }
    Ok(mask)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::MalformedJson(e.to_string())
}

/// Serializes a pyramid. Feature rows are included only when
/// `with_features` is set.
pub fn mask_json_string(p: &MaskPyramid, with_features: bool) -> Result<String> {
    let record = |m: &PseudoMask| -> Result<MaskRecord> {
        Ok(MaskRecord {
            rle: rle_encode(&m.mask, p.height, p.width)?.counts,
            area: m.mask.area(),
            level: m.level,
            feature: with_features.then(|| m.feature.clone()),
        })
    };
    let levels = p
        .levels
        .iter()
        .map(|l| {
            Ok(LevelRecord {
                tau: l.tau,
                instance: l.instance.iter().map(record).collect::<Result<_>>()?,
                semantic: l.semantic.iter().map(record).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    let doc = PyramidRecord {
        height: p.height,
        width: p.width,
        levels,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(json_error)?;
    s.push('\n');
    Ok(s)
}

/// Parses a pyramid. Masks stored without features get an empty feature.
pub fn mask_json_from_str(s: &str) -> Result<MaskPyramid> {
    let doc: PyramidRecord = serde_json::from_str(s).map_err(json_error)?;
    let (height, width) = (doc.height, doc.width);
    let masks = |records: Vec<MaskRecord>, kind: MaskKind| -> Result<Vec<PseudoMask>> {
        records
            .into_iter()
            .map(|r| {
                Ok(PseudoMask {
                    mask: decode_mask(r.rle, r.area, height, width)?,
                    feature: r.feature.unwrap_or_default(),
                    level: r.level,
                    kind,
                })
            })
            .collect()
    };
    let levels = doc
        .levels
        .into_iter()
        .map(|l| {
            Ok(PyramidLevel {
                tau: l.tau,
                instance: masks(l.instance, MaskKind::Instance)?,
                semantic: masks(l.semantic, MaskKind::Semantic)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MaskPyramid {
        height,
        width,
        levels,
    })
}

pub fn write_mask_json(p: &MaskPyramid, path: impl AsRef<Path>, with_features: bool) -> Result<()> {
    write_bytes(path.as_ref(), mask_json_string(p, with_features)?.as_bytes())
}

pub fn read_mask_json(path: impl AsRef<Path>) -> Result<MaskPyramid> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let s = std::str::from_utf8(&bytes).map_err(|e| Error::MalformedJson(e.to_string()))?;
    mask_json_from_str(s)
}

/// A flat list of masks over one grid: ground truth from `synth`, or the
/// student masks of a local view.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskList {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<(MaskKind, TokenMask)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListEntry {
    rle: Vec<usize>,
    area: usize,
    #[serde(default = "default_kind")]
    kind: MaskKind,
}

fn default_kind() -> MaskKind {
    MaskKind::Instance
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListRecord {
    height: usize,
    width: usize,
    masks: Vec<ListEntry>,
}

pub fn mask_list_string(list: &MaskList) -> Result<String> {
    let masks = list
        .masks
        .iter()
        .map(|(kind, m)| {
            Ok(ListEntry {
                rle: rle_encode(m, list.height, list.width)?.counts,
                area: m.area(),
                kind: *kind,
            })
        })
        .collect::<Result<_>>()?;
    let doc = ListRecord {
        height: list.height,
        width: list.width,
        masks,
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(json_error)?;
    s.push('\n');
    Ok(s)
}

pub fn mask_list_from_str(s: &str) -> Result<MaskList> {
    let doc: ListRecord = serde_json::from_str(s).map_err(json_error)?;
    let masks = doc
        .masks
        .into_iter()
        .map(|e| Ok((e.kind, decode_mask(e.rle, e.area, doc.height, doc.width)?)))
        .collect::<Result<_>>()?;
    Ok(MaskList {
        height: doc.height,
        width: doc.width,
        masks,
    })
}

pub fn write_mask_list(list: &MaskList, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), mask_list_string(list)?.as_bytes())
}

pub fn read_mask_list(path: impl AsRef<Path>) -> Result<MaskList> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let s = std::str::from_utf8(&bytes).map_err(|e| Error::MalformedJson(e.to_string()))?;
    mask_list_from_str(s)
}

/// Binary PGM (`P5`) of a `height×width` grid. Mask `i` is drawn with gray
/// level `i % 255 + 1`; where masks overlap the earlier one wins.
pub fn labelmap_pgm_bytes(masks: &[TokenMask], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut pixels = vec![0u8; height * width];
    for (i, m) in masks.iter().enumerate() {
        if m.len() != height * width {
            return Err(Error::LengthMismatch {
                left: m.len(),
                right: height * width,
            });
        }
        let gray = (i % 255) as u8 + 1;
        for p in m.iter() {
            if pixels[p] == 0 {
                pixels[p] = gray;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn render_labelmap_pgm(
    masks: &[TokenMask],
    height: usize,
    width: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_bytes(path.as_ref(), &labelmap_pgm_bytes(masks, height, width)?)
}

/// Pooling and distillation settings read from one JSON object.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub uniap: UniapConfig,
    pub querysd: QuerySdConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    thresholds: Option<Vec<f64>>,
    sigma: Option<f64>,
    omega_f: Option<f64>,
    omega_s: Option<f64>,
    phi: Option<usize>,
    dedup_iou: Option<f64>,
    spatial_from_level: Option<usize>,
    teacher_temp: Option<f64>,
    student_temp: Option<f64>,
    num_local_views: Option<usize>,
}

/// Every key is optional; missing keys keep their defaults. Syntax errors
/// are `MalformedJson`, everything else that fails is `InvalidConfig`.
pub fn config_from_str(s: &str) -> Result<Config> {
    let rec: ConfigRecord = serde_json::from_str(s).map_err(|e| {
        if e.is_data() {
            Error::InvalidConfig(e.to_string())
        } else {
            Error::MalformedJson(e.to_string())
        }
    })?;
    let mut cfg = Config::default();
    let u = &mut cfg.uniap;
    if let Some(v) = rec.thresholds {
        u.thresholds = v;
    }
    if let Some(v) = rec.sigma {
        u.sigma = v;
    }
    if let Some(v) = rec.omega_f {
        u.omega_f = v;
    }
    if let Some(v) = rec.omega_s {
        u.omega_s = v;
    }
    if let Some(v) = rec.phi {
        u.phi = v;
    }
    if let Some(v) = rec.dedup_iou {
        u.dedup_iou = v;
    }
    if let Some(v) = rec.spatial_from_level {
        u.spatial_from_level = v;
    }
    let q = &mut cfg.querysd;
    if let Some(v) = rec.teacher_temp {
        q.teacher_temp = v;
    }
    if let Some(v) = rec.student_temp {
        q.student_temp = v;
    }
    if let Some(v) = rec.num_local_views {
        q.num_local_views = v;
    }
    cfg.uniap.validate()?;
    cfg.querysd.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let s = std::str::from_utf8(&bytes).map_err(|e| Error::MalformedJson(e.to_string()))?;
    config_from_str(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_map(h: usize, w: usize, d: usize, seed: u32) -> FeatureMap {
        let mut x = seed.wrapping_mul(2654435761).wrapping_add(1);
        let data = (0..h * w * d)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                x as f32 / u32::MAX as f32 - 0.5
            })
            .collect();
        FeatureMap::new(h, w, d, data).unwrap()
    }

    #[test]
    fn fmap_round_trip() {
        let fm = random_map(8, 8, 16, 3);
        let bytes = fmap_to_bytes(&fm);
        assert_eq!(bytes.len(), 24 + 8 * 8 * 16 * 4);
        assert_eq!(&bytes[..4], b"FMAP");
        let back = fmap_from_bytes(&bytes).unwrap();
        assert_eq!(back, fm);
        assert_eq!(fmap_to_bytes(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fmap");
        write_fmap(&fm, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(read_fmap(&path).unwrap(), fm);
    }

    #[test]
    fn fmap_errors() {
        let mut bytes = fmap_to_bytes(&random_map(4, 4, 8, 1));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(fmap_from_bytes(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(fmap_from_bytes(&v2), Err(Error::UnsupportedVersion(2))));

        let mut f16 = bytes.clone();
        f16[20] = 1;
        assert!(matches!(fmap_from_bytes(&f16), Err(Error::UnsupportedDtype(1))));

        bytes.truncate(24 + 100 * 4);
        assert!(matches!(
            fmap_from_bytes(&bytes),
            Err(Error::TruncatedPayload { expected: 512, found: 400 })
        ));
        assert!(matches!(fmap_from_bytes(b"FMA"), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(
            read_fmap("/nonexistent/dir/x.fmap"),
            Err(Error::IoFailure { .. })
        ));
    }

    fn pm(len: usize, idx: &[usize], level: usize, kind: MaskKind) -> PseudoMask {
        PseudoMask {
            mask: TokenMask::from_indices(len, idx.iter().copied()).unwrap(),
            feature: vec![0.6, -0.8],
            level,
            kind,
        }
    }

    #[test]
    fn mask_json_examples() {
        let empty = MaskPyramid {
            height: 2,
            width: 3,
            levels: vec![
                PyramidLevel { tau: 0.8, instance: vec![], semantic: vec![] },
                PyramidLevel { tau: 0.7, instance: vec![], semantic: vec![] },
            ],
        };
        let s = mask_json_string(&empty, false).unwrap();
        assert_eq!(mask_json_from_str(&s).unwrap(), empty);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["levels"][1]["instance"], serde_json::json!([]));

        let full = MaskPyramid {
            height: 2,
            width: 3,
            levels: vec![PyramidLevel {
                tau: 0.5,
                instance: vec![pm(6, &[0, 1, 2, 3, 4, 5], 1, MaskKind::Instance)],
                semantic: vec![pm(6, &[1, 4], 1, MaskKind::Semantic)],
            }],
        };
        let s = mask_json_string(&full, true).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["levels"][0]["instance"][0]["rle"], serde_json::json!([0, 6]));
        assert_eq!(v["levels"][0]["semantic"][0]["rle"], serde_json::json!([1, 1, 2, 1, 1]));
        assert_eq!(mask_json_from_str(&s).unwrap(), full);

        let bare = mask_json_from_str(&mask_json_string(&full, false).unwrap()).unwrap();
        assert!(bare.iter_masks().all(|m| m.feature.is_empty()));
    }

    #[test]
    fn mask_json_errors() {
        assert!(matches!(mask_json_from_str("{"), Err(Error::MalformedJson(_))));
        let bad_rle = r#"{"height":1,"width":4,"levels":[{"tau":0.5,"instance":[{"rle":[1,2],"area":2,"level":0}],"semantic":[]}]}"#;
        assert!(matches!(mask_json_from_str(bad_rle), Err(Error::MalformedRle(_))));
        let bad_area = r#"{"height":1,"width":4,"levels":[{"tau":0.5,"instance":[{"rle":[1,3],"area":2,"level":0}],"semantic":[]}]}"#;
        assert!(matches!(mask_json_from_str(bad_area), Err(Error::MalformedJson(_))));
    }

    #[test]
    fn pgm_examples() {
        let header = b"P5\n2 2\n255\n";
        let one = labelmap_pgm_bytes(&[TokenMask::full(4)], 2, 2).unwrap();
        assert_eq!(&one[..header.len()], header);
        assert_eq!(&one[header.len()..], &[1, 1, 1, 1]);

        let left = TokenMask::from_indices(4, [0, 2]).unwrap();
        let right = TokenMask::from_indices(4, [1, 3]).unwrap();
        let two = labelmap_pgm_bytes(&[left.clone(), right], 2, 2).unwrap();
        assert_eq!(&two[header.len()..], &[1, 2, 1, 2]);

        let none = labelmap_pgm_bytes(&[], 2, 2).unwrap();
        assert_eq!(&none[header.len()..], &[0, 0, 0, 0]);

        // precedence: first mask wins where they overlap
        let both = labelmap_pgm_bytes(&[left, TokenMask::full(4)], 2, 2).unwrap();
        assert_eq!(&both[header.len()..], &[1, 2, 1, 2]);
    }

    #[test]
    fn pgm_gray_levels_wrap() {
        let masks: Vec<TokenMask> = (0..256).map(|i| TokenMask::singleton(256, i)).collect();
        let px = labelmap_pgm_bytes(&masks, 16, 16).unwrap();
        let body = &px[px.len() - 256..];
        assert_eq!(body[0], 1);
        assert_eq!(body[254], 255);
        assert_eq!(body[255], 1);
    }

    #[test]
    fn config_examples() {
        assert_eq!(config_from_str("{}").unwrap(), Config::default());
        let d = Config::default();
        assert_eq!(d.uniap.sigma, 0.07);
        assert_eq!(d.uniap.thresholds, vec![0.8, 0.7, 0.6, 0.5, 0.4]);
        assert_eq!((d.uniap.omega_f, d.uniap.omega_s, d.uniap.phi), (0.6, 0.4, 5));
        assert_eq!((d.uniap.dedup_iou, d.uniap.spatial_from_level), (0.9, 0));
        assert_eq!(
            (d.querysd.teacher_temp, d.querysd.student_temp, d.querysd.num_local_views),
            (0.04, 0.1, 2)
        );

        let e = config_from_str(r#"{"thresholds": [0.5, 0.6]}"#).unwrap_err();
        assert!(matches!(&e, Error::InvalidConfig(m) if m.contains("not strictly decreasing")));
        let e = config_from_str(r#"{"omega_f": 0.7}"#).unwrap_err();
        assert!(matches!(&e, Error::InvalidConfig(m) if m.contains("omega_f + omega_s")));
        assert!(matches!(config_from_str(r#"{"bogus": 1}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(config_from_str(r#"{"phi": "x"}"#), Err(Error::InvalidConfig(_))));
        assert!(matches!(config_from_str("{"), Err(Error::MalformedJson(_))));
        assert!(matches!(config_from_str(r#"{"student_temp": 0}"#), Err(Error::InvalidConfig(_))));

        let c = config_from_str(r#"{"omega_f": 1.0, "omega_s": 0.0, "phi": 1}"#).unwrap();
        assert_eq!((c.uniap.omega_f, c.uniap.phi), (1.0, 1));
    }

    #[test]
    fn mask_list_round_trip() {
        let list = MaskList {
            height: 2,
            width: 2,
            masks: vec![
                (MaskKind::Instance, TokenMask::from_indices(4, [0, 1]).unwrap()),
                (MaskKind::Semantic, TokenMask::from_indices(4, [3]).unwrap()),
            ],
        };
        let s = mask_list_string(&list).unwrap();
        assert_eq!(mask_list_from_str(&s).unwrap(), list);
        let implicit = r#"{"height":1,"width":2,"masks":[{"rle":[0,2],"area":2}]}"#;
        assert_eq!(mask_list_from_str(implicit).unwrap().masks[0].0, MaskKind::Instance);
    }

    proptest! {
        #[test]
        fn config_parsing_is_total(s in "\\{(\"(phi|sigma|omega_f|omega_s|thresholds|dedup_iou|x)\": ?(-?[0-9]\\.?[0-9]?|\\[[0-9., ]*\\]|\"a\"|null),? ?){0,4}\\}") {
            match config_from_str(&s) {
                Ok(c) => {
                    prop_assert!(c.uniap.validate().is_ok());
                    prop_assert!(c.querysd.validate().is_ok());
                }
                Err(Error::InvalidConfig(_)) | Err(Error::MalformedJson(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn pyramid_json_round_trip(h in 1usize..6, w in 1usize..6,
                                   bits in prop::collection::vec(any::<bool>(), 36 * 4),
                                   feats in prop::collection::vec(-1.0f32..1.0, 8),
                                   tau in -0.99f64..0.99) {
            let n = h * w;
            let mk = |k: usize, kind| PseudoMask {
                mask: TokenMask::from_bools(&bits[k * 36..k * 36 + n]),
                feature: feats[k * 2..k * 2 + 2].to_vec(),
                level: k,
                kind,
            };
            let p = MaskPyramid {
                height: h,
                width: w,
                levels: vec![
                    PyramidLevel { tau, instance: vec![mk(0, MaskKind::Instance), mk(1, MaskKind::Instance)], semantic: vec![mk(2, MaskKind::Semantic)] },
                    PyramidLevel { tau: tau / 2.0, instance: vec![], semantic: vec![mk(3, MaskKind::Semantic)] },
                ],
            };
            let s = mask_json_string(&p, true).unwrap();
            prop_assert_eq!(&mask_json_from_str(&s).unwrap(), &p);
            prop_assert_eq!(mask_json_string(&mask_json_from_str(&s).unwrap(), true).unwrap(), s);
        }

        #[test]
        fn fmap_bytes_round_trip(h in 1usize..5, w in 1usize..5, d in 1usize..6, seed in any::<u32>()) {
            let fm = random_map(h, w, d, seed);
            let bytes = fmap_to_bytes(&fm);
            prop_assert_eq!(fmap_to_bytes(&fmap_from_bytes(&bytes).unwrap()), bytes);
        }
    }
}
