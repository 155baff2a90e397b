fn main() {
    std::process::exit(milsurv::cli::dispatch(std::env::args_os()));
}
