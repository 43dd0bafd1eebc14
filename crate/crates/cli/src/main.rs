fn main() {
    let verbose = std::env::args().filter(|a| a == "-v" || a == "--verbose").count()
        + std::env::args()
            .filter(|a| a.starts_with("-vv"))
            .map(|a| a.len() - 2)
            .sum::<usize>();
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    std::process::exit(discourse_cli::main_with_args(std::env::args_os()));
}
