fn main() {
    std::process::exit(dxformer_cli::dispatch(std::env::args_os()));
}
