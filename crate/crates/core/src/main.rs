use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(n) = std::env::var("MULTIFLOW_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: MULTIFLOW_THREADS must be a positive integer, got '{n}'");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::from(multiflow::cli::run(std::env::args_os()) as u8)
}
