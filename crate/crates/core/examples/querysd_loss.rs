// Distillation loss between matched teacher and student queries, its
// gradient, and a finite-difference check of that gradient.
//
//     cargo run --example querysd_loss

use uniap::querysd::{querysd_grad, querysd_loss, querysd_loss_views, ViewBatch};
use uniap::{QueryRow, QuerySdConfig};

pub fn run_example() -> uniap::Result<f64> {
    let cfg = QuerySdConfig::default();
    let teacher: Vec<QueryRow> = vec![
        vec![2.0, 0.1, -1.0, 0.3].into(),
        vec![-0.5, 1.5, 0.0, 0.2].into(),
    ];
    let mut student: Vec<QueryRow> = vec![
        vec![0.2, 1.1, 0.0, -0.3].into(),
        vec![1.0, 0.0, -0.2, 0.1].into(),
        vec![0.0, 0.0, 0.0, 0.0].into(),
    ];
    // student 2 has no partner and contributes nothing
    let pairs = [(0, 1), (1, 0)];

    let loss = querysd_loss(&teacher, &student, &pairs, &cfg)?;
    let grad = querysd_grad(&teacher, &student, &pairs, &cfg)?;
    println!("loss {loss:.6}");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (s, row) in grad.iter().enumerate() {
        let mut fd = Vec::new();
        for j in 0..row.len() {
            let x = student[s].logits[j];
            student[s].logits[j] = x + h;
            let up = querysd_loss(&teacher, &student, &pairs, &cfg)?;
            student[s].logits[j] = x - h;
            let down = querysd_loss(&teacher, &student, &pairs, &cfg)?;
            student[s].logits[j] = x;
            fd.push((up - down) / (2.0 * h));
            worst = worst.max((fd[j] - row[j]).abs());
        }
        println!("student {s}: grad {row:.4?}\n           fd   {fd:.4?}");
    }
    println!("largest gradient discrepancy {worst:.2e}");

    let views = [
        ViewBatch { student: student.clone(), pairs: pairs.to_vec() },
        ViewBatch { student: student[..2].to_vec(), pairs: vec![(0, 0)] },
    ];
    println!("loss over {} local views {:.6}", views.len(), querysd_loss_views(&teacher, &views, &cfg)?);
    Ok(loss)
}

fn main() -> uniap::Result<()> {
    run_example().map(|_| ())
}
