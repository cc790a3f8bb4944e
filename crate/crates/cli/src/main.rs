use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use carbonflex::scenario::run_scenario_file;
use carbonflex::Error;
use clap::Parser;

/// Runs scenario files and writes their artifact trees.
#[derive(Debug, Parser)]
#[command(name = "carbonflex", version)]
struct Args {
    /// Scenario file, or a directory of `*.json` scenarios.
    #[arg(long)]
    scenario: PathBuf,
    /// Root for output directories, one per scenario file stem.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the seed in every scenario.
    #[arg(long)]
    seed_override: Option<u64>,
}

fn scenario_files(path: &Path) -> Result<Vec<PathBuf>, Error> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let files = match scenario_files(&args.scenario) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("{}", e.one_line());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(files.len().max(1));
    let chunks: Vec<&[PathBuf]> = files.chunks(files.len().div_ceil(workers).max(1)).collect();
    let results: Vec<(PathBuf, Result<PathBuf, Error>)> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                s.spawn(|| {
                    chunk
                        .iter()
                        .map(|f| (f.clone(), run_scenario_file(f, args.out.as_deref(), args.seed_override)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut code = 0;
    for (file, r) in results {
        match r {
            Ok(dir) => println!("ok {} -> {}", file.display(), dir.display()),
            Err(e) => {
                eprintln!("{} scenario={}", e.one_line(), file.display());
                if code == 0 {
                    code = e.exit_code();
                }
            }
        }
    }
    ExitCode::from(code as u8)
}
