//! Sequential train/val/test splits, with and without revisit anchors.

use moslabel::dataset::{make_splits, write_splits, DEFAULT_SPLIT_RATIOS};

fn main() -> moslabel::Result<()> {
    let n = 12_188;
    let plain = make_splits(n, DEFAULT_SPLIT_RATIOS, None, None)?;
    println!("{n} frames: train {} val {} test {}", plain.train_len(), plain.val.len(), plain.test.len());
    println!("  val {:?} test {:?}", plain.val, plain.test);

    let anchored = make_splits(n, DEFAULT_SPLIT_RATIOS, Some(2250), Some(8600))?;
    println!("anchored at 2250 / 8600: train blocks {:?}", anchored.train);
    println!("  val {:?} test {:?}", anchored.val, anchored.test);

    match make_splits(n, DEFAULT_SPLIT_RATIOS, Some(2250), Some(3000)) {
        Ok(_) => println!("unexpected: overlapping anchors accepted"),
        Err(e) => println!("overlapping anchors: {e}"),
    }
    let path = std::env::temp_dir().join("moslabel-splits.txt");
    write_splits(&anchored, &path)?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}
