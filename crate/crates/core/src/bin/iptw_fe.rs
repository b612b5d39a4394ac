fn main() {
    std::process::exit(iptw_fe::cli::run());
}
