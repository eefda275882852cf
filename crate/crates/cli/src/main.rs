fn main() {
    std::process::exit(sgdsde::main_with_args(std::env::args_os()));
}
