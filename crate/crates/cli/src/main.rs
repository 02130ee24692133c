fn main() {
    println!("vcvts");
}
