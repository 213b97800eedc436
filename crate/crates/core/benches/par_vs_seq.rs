// placeholder, replaced with the real bench suite
fn main() {}
