fn main() {
    std::process::exit(pm_viab::cli::run(std::env::args_os()));
}
