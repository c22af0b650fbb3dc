fn main() {
    println!("gaitmoe");
}
