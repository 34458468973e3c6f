use std::io::Write;

use kcr_core::events;

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            if record.target() == events::TARGET {
                writeln!(buf, "{}", record.args())
            } else {
                let line = serde_json::json!({
                    "level": record.level().as_str(),
                    "target": record.target(),
                    "message": record.args().to_string(),
                });
                writeln!(buf, "{line}")
            }
        })
        .init();
}

fn main() {
    init_logging();
    let mut stdout = std::io::stdout().lock();
    let code = kcr_cli::run(std::env::args_os(), &mut stdout);
    let _ = stdout.flush();
    std::process::exit(code);
}
