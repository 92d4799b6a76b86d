use clap::Parser;
use coursekb::cli::{execute, report_error, Cli, Command};
use coursekb::config::Config;
use std::process::ExitCode;
use std::sync::Arc;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "coursekb=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = Config::load(cli.config.as_deref()).and_then(|config| match cli.command {
        Command::Serve => serve(&config),
        command => execute(&config, command, &mut std::io::stdout().lock()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report_error(&err, &mut std::io::stderr());
            ExitCode::FAILURE
        }
    }
}

fn serve(config: &Config) -> coursekb::Result<()> {
    let platform = Arc::new(config.build_platform()?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| coursekb::Error::Internal(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen_addr)
            .await
            .map_err(|e| coursekb::Error::InvalidArgument(format!("cannot listen on {}: {e}", config.listen_addr)))?;
        tracing::info!(addr = %config.listen_addr, "serving");
        coursekb::api::serve(platform, listener)
            .await
            .map_err(|e| coursekb::Error::Internal(e.to_string()))
    })
}
