fn main() {
    println!("motok");
}
