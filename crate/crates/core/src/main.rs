fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DGL_LOG", "info")).init();
    std::process::exit(dgl_lab::cli::run(std::env::args_os()));
}
