fn main() {
    std::process::exit(dverec::run(std::env::args_os()));
}
