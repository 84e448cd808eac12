use clap::Parser;

fn main() {
    let cli = hwdmd::cli::Cli::parse();
    match hwdmd::cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            let record = serde_json::json!({
                "category": e.category().as_str(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            std::process::exit(1);
        }
    }
}
