//! A multi-stage schedule: blocks first, then attention and MLP modules
//! jointly, then channel groups. The text form parses and prints back.

use ssm_shed::model::{ArchDescriptor, Model};
use ssm_shed::shedder::{run_schedule, CalibrationSet, Schedule, Scorer};
use ssm_shed::training::Corpus;

fn main() -> ssm_shed::Result<()> {
    let schedule: Schedule = "MambaBlock:2 + MhaModule&MlpModule:1 + MlpChannelGroup:3:32".parse()?;
    println!("schedule: {schedule}");

    let desc = ArchDescriptor { d_model: 32, ..ArchDescriptor::toy_hybrid() };
    let mut model = Model::build(&desc, 3)?;
    let cal = CalibrationSet::new(Corpus::bundled().calibration(4, 64)?)?;
    let plan = run_schedule(&mut model, &schedule, &cal, &Scorer::with_threads(2)?)?;
    for s in &plan.steps {
        println!("stage {} step {}  {:<24} {:.3}", s.stage, s.step, s.action.to_string(), s.score);
    }
    println!("{} candidates scored, final ratio {:.4}", plan.trace.len(), model.prune_ratio());
    Ok(())
}
