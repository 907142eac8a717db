fn main() {
    println!("hsa");
}
