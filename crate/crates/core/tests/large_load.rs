use nowcast_core::datapipe::{load_csv, split_counts, window_anchors, WindowSpec};
use nowcast_core::synth::{gen_advection, SynthConfig};

const HOURS: usize = 105_192;

#[test]
fn full_length_file_loads() {
    let ds = gen_advection(&SynthConfig {
        hours: HOURS,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.csv");
    ds.save_csv(&path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.hours(), HOURS);
    assert_eq!(back, ds);

    let six = window_anchors(HOURS, WindowSpec { input_length: 24, lead: 6 }).unwrap();
    let twelve = window_anchors(HOURS, WindowSpec { input_length: 24, lead: 12 }).unwrap();
    assert_eq!(six.len(), 105_163);
    assert_eq!(twelve.len(), 105_157);
    let c = split_counts(six.len()).unwrap();
    assert_eq!((c.train, c.validation, c.test), (89_388, 2_366, 13_409));
}
