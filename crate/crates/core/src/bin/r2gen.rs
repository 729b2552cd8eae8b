fn main() {
    // placeholder, wired to the cli module later
}
