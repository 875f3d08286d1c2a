use corrnet::eval::costs_per_second;
use corrnet::model::ModelConfig;
use corrnet_demo::{cost_summary, published_config_text, phat_gcc, rir_decay, schroeder_db, DecayParams, GccParams};

#[test]
fn gcc_peak_finds_the_delay_in_a_dry_room() {
    for angle in [-60.0, 0.0, 25.0, 70.0] {
        let p = GccParams {
            angle_deg: angle,
            beta: 1.0,
            t60: 0.0,
            snr_db: None,
            ..GccParams::default()
        };
        let t = phat_gcc(&p).unwrap();
        // lag grid step is 2 * 1.5 * 0.1 / 343 / 400 s, about 2.2 µs
        assert!((t.peak_lag_ms - t.true_lag_ms).abs() < 0.01, "{angle}: {} vs {}", t.peak_lag_ms, t.true_lag_ms);
        assert_eq!(t.gcc.iter().copied().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(t.magnitude_db.len(), 257);
        assert_eq!(t.freqs_hz[256], 8000.0);
    }
}

#[test]
fn full_phat_flattens_the_spectrum() {
    let spread = |beta: f64| {
        let t = phat_gcc(&GccParams { beta, t60: 0.0, snr_db: None, ..GccParams::default() }).unwrap();
        let inner = &t.magnitude_db[8..248];
        inner.iter().copied().fold(f64::MAX, f64::min)
    };
    // unit modulus at β = 1, except cells below the PHAT floor in quiet frames
    assert!(spread(1.0) > -3.0, "{}", spread(1.0));
    assert!(spread(0.0) < spread(1.0) - 10.0);
}

#[test]
fn gcc_rejects_bad_parameters() {
    assert!(phat_gcc(&GccParams { beta: 1.5, ..GccParams::default() }).is_err());
    assert!(phat_gcc(&GccParams { spacing: 0.0, ..GccParams::default() }).is_err());
}

#[test]
fn fitted_decay_matches_the_requested_t60() {
    for t60 in [0.2, 0.5, 0.9] {
        let d = rir_decay(&DecayParams { t60, ..DecayParams::default() }).unwrap();
        let fit = d.t60_fit.unwrap();
        assert!((fit / t60 - 1.0).abs() < 0.1, "{t60}: {fit}");
        assert!((d.drr_db.unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!((d.direct_ms - 1.5 / 343.0 * 1e3).abs() < 1e-9);
        assert_eq!(d.edc_db[0], 0.0);
        assert!(d.edc_db.windows(2).all(|w| w[1] <= w[0]));
    }
    let dry = rir_decay(&DecayParams { t60: 0.0, ..DecayParams::default() }).unwrap();
    assert_eq!((dry.t60_fit, dry.drr_db), (None, None));
}

#[test]
fn schroeder_of_an_exponential_is_linear() {
    let fs = 1000.0;
    let h: Vec<f64> = (0..4000).map(|i| (-6.907755 * i as f64 / fs).exp()).collect();
    let edc = schroeder_db(&h);
    // energy decays 60 dB per second far from the end
    assert!((edc[1000] + 60.0).abs() < 0.1, "{}", edc[1000]);
}

#[test]
fn cost_calculator_matches_the_core_crate() {
    let text = published_config_text(7, 512);
    let s = cost_summary(&text, 16000, 128).unwrap();
    let r = costs_per_second(&ModelConfig::published(7, 257), 16000, 128);
    assert_eq!(s.params, r.params);
    assert_eq!(s.params, 4_836_947);
    assert!((s.gmacs_per_second - r.macs_per_second / 1e9).abs() < 1e-12);
    let module_params: u64 = s.modules.iter().map(|m| m.1).sum();
    assert_eq!(module_params, s.params);
    assert!(cost_summary("C = 0", 16000, 128).is_err());
    assert!(cost_summary(&text, 16000, 0).is_err());
}
