use clap::Parser;
use koopsim::cli::{run, Cli};

// training allocates and frees many multi-megabyte buffers per step; the
// system allocator returns them to the kernel every time
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("koopsim: {e}");
        std::process::exit(e.exit_code());
    }
}
