fn main() {
    std::process::exit(unet_edge::cli::main_with_args(std::env::args_os()));
}
