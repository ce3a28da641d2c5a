use std::process::exit;

fn main() {
    match grelu_lab::cli::run() {
        Ok(code) => exit(code),
        Err(err) => {
            eprintln!("ERROR: {err:#}");
            exit(1);
        }
    }
}
