fn main() {
    std::process::exit(dreamstory_cli::run(std::env::args()));
}
