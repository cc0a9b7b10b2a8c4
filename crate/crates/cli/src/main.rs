fn main() {
    std::process::exit(rlvr_cli::dispatch(std::env::args()));
}
