fn main() {
    std::process::exit(ssv_core::cli::main_with(std::env::args_os()));
}
