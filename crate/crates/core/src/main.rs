fn main() {
    std::process::exit(ipfusion::run_cli());
}
