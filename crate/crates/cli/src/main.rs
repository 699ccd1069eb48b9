use std::io::{self, Write};

/// Stdout that drops output once the reader has gone away, so piping into
/// `head` ends quietly instead of reporting an I/O error.
struct Stdout {
    inner: io::Stdout,
    closed: bool,
}

impl Write for Stdout {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if !self.closed {
            match self.inner.write(buf) {
                Err(e) if e.kind() == io::ErrorKind::BrokenPipe => self.closed = true,
                other => return other,
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        match self.inner.flush() {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {
                self.closed = true;
                Ok(())
            }
            other => other,
        }
    }
}

fn main() {
    let mut out = Stdout {
        inner: io::stdout(),
        closed: false,
    };
    let code = intentgrasp_cli::commands::main_with(std::env::args_os(), &mut out, &mut io::stderr());
    std::process::exit(code);
}
