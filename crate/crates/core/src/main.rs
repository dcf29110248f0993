fn main() {
    std::process::exit(agent_kernel::cli::run(std::env::args_os()));
}
