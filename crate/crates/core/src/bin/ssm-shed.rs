fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(ssm_shed::harness::cli(std::env::args_os()));
}
