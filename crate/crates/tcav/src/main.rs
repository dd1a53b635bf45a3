fn main() {
    std::process::exit(tcav::cli::main());
}
