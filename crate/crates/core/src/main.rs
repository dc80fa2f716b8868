fn main() {
    std::process::exit(embed_distill::cli::run_from_args(std::env::args_os()));
}
