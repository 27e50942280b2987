fn main() {
    std::process::exit(def_core::cli::main_with_args(std::env::args_os()));
}
