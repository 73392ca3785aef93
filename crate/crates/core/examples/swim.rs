//! Rolls out the unit-initialized circuit on bodies of several sizes and
//! prints return and distance covered.

use ncap_core::{rollout, CommandSchedule, NcapFlags, NcapPolicy, SwimmerConfig};

fn main() -> ncap_core::Result<()> {
    for n in [3, 5, 8, 12] {
        let env = SwimmerConfig::with_joints(n);
        let mut policy = NcapPolicy::initialized(n, NcapFlags::default(), 0)?;
        let out = rollout(&mut policy, &env, &CommandSchedule::swim(), 0, false)?;
        println!("N={n:>2}  return {:7.1}  distance {:5.2}", out.episode_return, out.distance());
    }
    Ok(())
}
