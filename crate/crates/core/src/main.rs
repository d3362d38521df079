fn main() {
    std::process::exit(hitdp::cli::main_with(std::env::args_os()));
}
