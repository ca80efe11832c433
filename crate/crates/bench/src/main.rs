fn main() {
    // BA2_LOG=info (or debug, trace) shows training progress on stderr.
    let level = std::env::var("BA2_LOG").ok().and_then(|l| l.parse().ok()).unwrap_or(tracing::Level::WARN);
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).with_ansi(false).init();
    std::process::exit(ba2_bench::cli::run(std::env::args_os()));
}
