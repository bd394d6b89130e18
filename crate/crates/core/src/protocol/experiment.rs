use std::sync::Arc;

use log::{debug, info};
use thiserror::Error;

use super::{evaluate_clients, run_round, ClientState, ProtocolError, RoundPlan, ServerState, Settings};
use crate::data::{generate_synthetic, load_container, partition, Dataset, SyntheticSpec};
use crate::harness::{mean_std, Checkpoint, CheckpointHeader, DataSource, Evaluation, ExperimentConfig, MetricsRecord};
use crate::models::init_params;
use crate::seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error(transparent)]
    Runtime(#[from] ProtocolError),
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    /// Accuracy of the initial models.
    pub init: Evaluation,
    /// Accuracy after the last round.
    pub last: Evaluation,
    pub checkpoint: Checkpoint,
}

/// Client shards and the shared test set.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<(Vec<Dataset>, Dataset), ExperimentError> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synthetic => {
            let spec = |samples, stream| SyntheticSpec {
                classes: cfg.model.classes,
                samples,
                image: cfg.model.image,
                noise: d.noise,
                seed: seed::derive(cfg.seeds.data, &[stream]),
            };
            let train = generate_synthetic(&spec(d.train_samples, 1)).map_err(|e| ExperimentError::Config(vec![e.to_string()]))?;
            let test = generate_synthetic(&spec(d.test_samples, 2)).map_err(|e| ExperimentError::Config(vec![e.to_string()]))?;
            (train, test)
        }
        DataSource::Container => {
            let load = |p: &Option<std::path::PathBuf>| {
                let p = p.as_ref().ok_or_else(|| ExperimentError::Config(vec!["container path missing".into()]))?;
                load_container(p).map_err(|e| ExperimentError::Config(vec![e.to_string()]))
            };
            (load(&d.train_path)?, load(&d.test_path)?)
        }
    };
    let mut problems = Vec::new();
    for (name, set) in [("training", &train), ("test", &test)] {
        if set.image_shape() != cfg.model.image {
            problems.push(format!("{name} images are {:?}, model expects {:?}", set.image_shape(), cfg.model.image));
        }
        if set.classes() != cfg.model.classes {
            problems.push(format!("{name} data has {} classes, model has {}", set.classes(), cfg.model.classes));
        }
    }
    if test.is_empty() {
        problems.push("test set is empty".into());
    }
    if !problems.is_empty() {
        return Err(ExperimentError::Config(problems));
    }
    let shards = partition(&train, &cfg.partition_spec()).map_err(|e| ExperimentError::Config(vec![e.to_string()]))?;
    Ok((shards, test))
}

fn evaluation(round: u32, per_client: Vec<f64>) -> Evaluation {
    let (mean, std) = mean_std(&per_client).unwrap_or((0.0, 0.0));
    Evaluation { round, per_client, mean, std }
}

/// Trains for `cfg.rounds` rounds and evaluates on the shared test set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate().map_err(|e| match e {
        crate::harness::HarnessError::Config(p) => ExperimentError::Config(p),
        other => ExperimentError::Config(vec![other.to_string()]),
    })?;
    let (shards, test) = build_datasets(cfg)?;
    let s: Settings = cfg.settings();
    let n = shards.len();
    info!(
        "{}: {} clients with {:?} samples, {} test samples, {} rounds",
        cfg.variant,
        n,
        shards.iter().map(Dataset::len).collect::<Vec<_>>(),
        test.len(),
        cfg.rounds
    );
    let init = init_params(&cfg.model, cfg.seeds.init);
    let mut clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(c, shard)| ClientState::new(c, &init, Arc::new(shard), cfg.variant, seed::derive(cfg.seeds.noise, &[c as u64])))
        .collect();
    let mut server = ServerState::new(&init, n, seed::derive(cfg.seeds.sampling, &[0x5A]));
    let ensemble = cfg.protocol.eval_ensemble;
    let batch_seed = seed::derive(cfg.seeds.data, &[0xBA7C]);

    let init_eval = evaluation(0, evaluate_clients(&s, &clients, &server, &test, ensemble)?);
    info!("round 0: mean balanced accuracy {:.4} ± {:.4}", init_eval.mean, init_eval.std);
    let mut last = init_eval.clone();
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        let plan = RoundPlan::new(round, cfg.variant, cfg.unify_period, n, cfg.batch_size, batch_seed);
        let outcome = run_round(&plan, &mut clients, &mut server, &s, cfg.transport.kind)?;
        debug!("round {round}: {} messages, losses {:?}", outcome.messages, outcome.train_loss);
        let mut record = MetricsRecord::new(round, outcome.train_loss, outcome.sampled, cfg.model.sample_limit);
        let due = round == cfg.rounds || (cfg.eval_every > 0 && round % cfg.eval_every == 0);
        if due {
            let acc = evaluate_clients(&s, &clients, &server, &test, ensemble)?;
            last = evaluation(round, acc.clone());
            record.set_accuracy(acc);
            info!("round {round}: mean balanced accuracy {:.4} ± {:.4}", last.mean, last.std);
        }
        records.push(record);
    }
    let models = clients.iter().map(|c| super::client_model(c, &server)).collect();
    let checkpoint = Checkpoint {
        header: CheckpointHeader {
            variant: cfg.variant,
            model: cfg.model.clone(),
            round: cfg.rounds,
            clients: n,
            eval_ensemble: ensemble,
        },
        models,
    };
    Ok(ExperimentOutput { records, init: init_eval, last, checkpoint })
}
