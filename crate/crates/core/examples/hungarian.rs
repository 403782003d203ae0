//! Minimum-cost matching of queries to ground truth.

use datr::detector::boxes::BBox;
use datr::detector::matcher::{assignment_cost, linear_assignment, match_image, MatchCostWeights};

fn main() {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let pairs = linear_assignment(&cost);
    println!("assignment {pairs:?}, cost {}", assignment_cost(&cost, &pairs));

    // Five queries, two objects: the matcher prefers the confident, well-placed queries.
    let gt = [BBox::new(0.3, 0.3, 0.2, 0.2), BBox::new(0.7, 0.6, 0.3, 0.2)];
    let boxes = [
        BBox::new(0.5, 0.5, 0.4, 0.4),
        BBox::new(0.31, 0.3, 0.2, 0.21),
        BBox::new(0.1, 0.9, 0.1, 0.1),
        BBox::new(0.69, 0.61, 0.28, 0.2),
        BBox::new(0.3, 0.3, 0.2, 0.2),
    ];
    let probs = vec![
        vec![0.2, 0.2],
        vec![0.9, 0.1],
        vec![0.5, 0.5],
        vec![0.1, 0.8],
        vec![0.05, 0.05],
    ];
    let m = match_image(&probs, &boxes, &gt, &[0, 1], &MatchCostWeights::default());
    println!("query/object pairs {m:?}");
}
