use std::io::{ErrorKind, Write};

use clap::Parser;

fn main() -> anyhow::Result<()> {
    let outcome = cafe_cli::run(cafe_cli::Cli::parse())?;
    let mut out = std::io::stdout().lock();
    let written = write!(out, "{}", outcome.summary).and_then(|_| {
        for f in &outcome.files {
            writeln!(out, "wrote {}", f.display())?;
        }
        out.flush()
    });
    match written {
        // A closed pipe (`cafe ... | head`) is not a failure; the files exist.
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
