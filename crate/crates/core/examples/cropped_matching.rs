// Pool a teacher view, crop its masks to a student's local view and match
// them to the student's masks by Dice score.
//
//     cargo run --example cropped_matching

use uniap::maskops::crop_mask;
use uniap::querysd::{crop_and_filter_teacher, cropped_match, dice_cost_matrix, hungarian_max};
use uniap::synth::synth_generate;
use uniap::{run_uniap, CropBox, MaskKind, MatchResult, UniapConfig};

pub fn run_example() -> uniap::Result<MatchResult> {
    let (fm, truth) = synth_generate(16, 16, 32, 4, 0.05, 3)?;
    let pyramid = run_uniap(&fm, &UniapConfig::default())?;
    let teacher: Vec<_> = pyramid.levels[0].instance.clone();
    println!("teacher: {} instance masks on the 16x16 grid", teacher.len());

    // the student sees the lower-right 10x10 corner; stand in for its
    // predictions with the cropped ground truth, most recent first
    let bx = CropBox::new(6, 6, 10, 10);
    let mut student = Vec::new();
    for t in truth.iter().rev() {
        if let Some(m) = crop_mask(t, 16, 16, &bx)? {
            student.push(m);
        }
    }
    let kept = crop_and_filter_teacher(&teacher, 16, 16, &bx)?;
    println!(
        "{} teacher masks reach into the box, {} student masks",
        kept.len(),
        student.len()
    );

    let cropped: Vec<_> = kept.iter().map(|(m, _)| m.clone()).collect();
    for (s, row) in dice_cost_matrix(&student, &cropped)?.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|d| format!("{d:.2}")).collect();
        println!("  student {s}: dice {}", cells.join(" "));
    }
    let direct = hungarian_max(&dice_cost_matrix(&student, &cropped)?)?;
    let result = cropped_match(&student, &teacher, 16, 16, &bx)?;
    assert_eq!(direct.total_dice, result.total_dice);
    for &(s, t) in &result.pairs {
        println!("student {s} <- teacher {t} ({:?})", MaskKind::Instance);
    }
    println!(
        "total dice {:.3}, unmatched teachers {:?}",
        result.total_dice, result.unmatched_teachers
    );
    Ok(result)
}

fn main() -> uniap::Result<()> {
    run_example().map(|_| ())
}
