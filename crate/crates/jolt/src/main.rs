fn main() {
    std::process::exit(jolt::cli::dispatch(std::env::args_os()));
}
