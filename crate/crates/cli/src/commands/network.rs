use std::net::SocketAddr;

use flcascade_core::federation::{build_trainers, Federation};
use flcascade_core::models::ArchitectureId;
use flcascade_core::transport::{self, client_run, ClientOptions, ClientSummary, RetryPolicy, ServerOptions, TcpDispatch};

use super::train::{run_stem, save_run};
use super::{create_dir, load_experiment_data};
use crate::runner::outcome;
use crate::{initial_weights, CliError, ExperimentConfig, RunOutcome};

/// Runs repetition 0 of `config` as a TCP server on `bind`, waiting for
/// `config.fl.num_clients` clients. `on_bound` gets the listening address
/// (useful with port 0). Writes the same files as a simulated repetition 0;
/// on failure the log of the completed rounds is still written.
pub fn serve(
    config: &ExperimentConfig,
    bind: &str,
    mut options: ServerOptions,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let data = load_experiment_data(config)?;
    create_dir(&config.output_dir)?;
    options.num_clients = config.fl.num_clients;
    let mut dispatch = TcpDispatch::bind(bind, options)?;
    on_bound(dispatch.local_addr().map_err(|e| CliError::Config(format!("listener address: {e}")))?);

    let fl = config.repetition(0);
    let initial = initial_weights(config.architecture, fl.seed)?;
    let mut fed = Federation::new(fl, initial)?.record_timing(config.record_timing);
    let result = transport::serve(&mut dispatch, &mut fed, &data.test);
    let run = outcome(&fed);
    let stem = run_stem(config.task, 0);
    if result.is_err() {
        run.log().write(&super::log_file(&config.output_dir, &stem))?;
    }
    result?;
    save_run(&config.output_dir, &stem, &run)?;
    Ok(run)
}

/// Joins the server at `addr` as `client_id`, training that client's shard
/// of the config's dataset. `architecture` overrides the one the client is
/// prepared to train.
pub fn client(
    config: &ExperimentConfig,
    addr: &str,
    client_id: usize,
    architecture: Option<ArchitectureId>,
    retry: RetryPolicy,
) -> Result<ClientSummary, CliError> {
    config.validate()?;
    if client_id >= config.fl.num_clients {
        return Err(CliError::Config(format!(
            "client id {client_id} out of range for {} clients",
            config.fl.num_clients
        )));
    }
    let data = load_experiment_data(config)?;
    let mut trainer = build_trainers(&data.train, config.fl.num_clients, config.fl.seed)?.swap_remove(client_id);
    let options = ClientOptions {
        retry,
        expected_architecture: Some(architecture.unwrap_or(config.architecture).to_string()),
    };
    Ok(client_run(addr, &mut trainer, &options)?)
}
