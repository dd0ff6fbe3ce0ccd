fn main() {
    std::process::exit(spectra::cli::run(std::env::args_os()));
}
