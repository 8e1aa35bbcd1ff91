fn main() {
    std::process::exit(prunekit::reporting::cli_main(std::env::args_os()));
}
