fn main() {
    // CSV output is routinely piped into `head` and friends; dying on a
    // closed pipe like any other filter beats panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(uecct::cli::main_with_args(std::env::args_os()));
}
