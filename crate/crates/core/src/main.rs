#[global_allocator]
static ALLOC: motionseg::cli::alloc::PeakAlloc = motionseg::cli::alloc::PeakAlloc;

fn main() {
    std::process::exit(motionseg::cli::main_with_args(std::env::args_os()));
}
