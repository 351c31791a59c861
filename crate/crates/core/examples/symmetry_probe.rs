//! Which fusion blocks are symmetric under a swap of their inputs: a swap
//! construction for the symmetric ones, a least-squares search for a
//! witness on the parameter-free asymmetric ones.

use asymfusion::fusion::{refute_symmetry_by_search, verify_symmetric_by_construction, Block, ProbeShape, RefuteOptions};

fn main() -> asymfusion::Result<()> {
    for block in Block::ALL {
        let v = if block.has_swap_construction() {
            verify_symmetric_by_construction(block, ProbeShape::default(), 10, 0)?
        } else {
            refute_symmetry_by_search(block, &RefuteOptions::default())?
        };
        println!("{:<16} {:<12} {:?} residual {:.2e}", v.block, v.method, v.verdict, v.residual);
    }
    let control = refute_symmetry_by_search(Block::Average, &RefuteOptions::default())?;
    println!("refuter on average (control): residual {:.2e}", control.residual);
    Ok(())
}
