fn main() {
    std::process::exit(cvt_assd::cli::run(std::env::args_os()));
}
