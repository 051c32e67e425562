use clap::Parser;

use cuboidnet::cli::{run, Cli};
use cuboidnet::tensor::inject_conv2d_backward_fault;

fn main() {
    // Negative-control hook for the self-test.
    if std::env::var("CUBOIDNET_FAULT").is_ok_and(|v| v == "conv2d_backward") {
        inject_conv2d_backward_fault(true);
    }
    std::process::exit(run(Cli::parse()));
}
