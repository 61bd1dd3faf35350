fn main() {
    std::process::exit(metaproto::cli::main_with_args(std::env::args_os()));
}
