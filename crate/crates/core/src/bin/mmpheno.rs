fn main() {
    std::process::exit(mmpheno::cli::run(std::env::args_os()));
}
