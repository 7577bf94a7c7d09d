use ambientflow::Error;

pub const SUCCESS: i32 = 0;
pub const CONFIG: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const IO: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Domain(_) | Error::Budget(_) | Error::Json(_) => CONFIG,
        Error::Numeric { .. } | Error::Divergence { .. } => NUMERIC,
        Error::Io(_) | Error::Ingest { .. } | Error::Csv(_) => IO,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Domain(_) => "domain",
        Error::Budget(_) => "budget",
        Error::Json(_) => "json",
        Error::Numeric { .. } => "numeric",
        Error::Divergence { .. } => "divergence",
        Error::Io(_) => "io",
        Error::Ingest { .. } => "ingest",
        Error::Csv(_) => "csv",
    }
}

/// One-line JSON object describing `e`, as written to stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": kind(e),
        "exit_code": exit_code(e),
        "message": e.to_string(),
    })
    .to_string()
}
