fn main() {
    std::process::exit(asymfusion::harness::run_cli(std::env::args_os()));
}
