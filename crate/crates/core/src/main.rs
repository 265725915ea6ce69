fn main() {
    mxrun::cli::init_logging();
    std::process::exit(mxrun::cli::main(std::env::args_os()));
}
