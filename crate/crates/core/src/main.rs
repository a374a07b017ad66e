fn main() {
    std::process::exit(ptrrank::cli::run(std::env::args_os()));
}
