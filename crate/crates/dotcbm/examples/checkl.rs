use dotcbm::data::{generate_synthetic, SynthConfig};
fn main() {
    let ds = generate_synthetic(&SynthConfig { seed: 42, ..SynthConfig::default() }).unwrap();
    println!("L =");
    for k in 0..4 {
        let row: Vec<String> = (0..6).map(|j| format!("{}", ds.bank.labels[[k, j]] as u8)).collect();
        println!("  class {k}: {}", row.join(" "));
    }
    for a in 0..6 { for b in 0..a {
        let same = (0..4).all(|k| ds.bank.labels[[k, a]] == ds.bank.labels[[k, b]]);
        if same { println!("duplicate concept columns: {b} and {a}"); }
    }}
}
