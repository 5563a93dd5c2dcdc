fn main() {
    std::process::exit(ovw::cli::run(std::env::args_os()));
}
