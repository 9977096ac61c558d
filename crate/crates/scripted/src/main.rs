use clap::Parser;

/// Serve the scripted chat model until killed.
#[derive(Parser)]
#[command(name = "scripted-backend")]
struct Args {
    /// Port on 127.0.0.1; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    port: u16,
}

fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let server = mcpbox_scripted::ScriptedServer::start_on(args.port)?;
    println!("{}", server.endpoint());
    server.wait();
    Ok(())
}
