fn main() {
    std::process::exit(preemptible::cli::main_with_args(std::env::args_os()));
}
