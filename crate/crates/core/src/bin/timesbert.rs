fn main() {
    std::process::exit(timesbert::cli::run());
}
