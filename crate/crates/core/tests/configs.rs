use std::path::Path;

use pivflow::config::{parse_config, parse_config_str, serialize_config};

#[test]
fn shipped_configs_parse_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("cfg") {
            continue;
        }
        let c = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        c.validate().unwrap();
        assert_eq!(
            parse_config_str(&serialize_config(&c)).unwrap(),
            c,
            "{}",
            path.display()
        );
        n += 1;
    }
    assert!(n >= 4);
}
