fn main() {
    std::process::exit(sfvd::run_cli());
}
