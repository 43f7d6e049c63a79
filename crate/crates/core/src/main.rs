fn main() {
    println!("freqdgt");
}
