fn main() {
    std::process::exit(qcnn_core::cli::run(std::env::args_os()));
}
