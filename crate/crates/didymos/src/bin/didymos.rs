fn main() {
    didymos::cli::main();
}
