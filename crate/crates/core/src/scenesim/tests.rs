use super::*;

fn opts(order: usize) -> RirOptions {
    RirOptions { sample_rate: 8000, max_order: order, max_images: 1_000_000 }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0
}

const ROOM: Room = Room { dims: [6.0, 5.0, 3.0], rt60: 0.5 };

#[test]
fn order_zero_is_a_single_delayed_impulse() {
    // 56 samples of travel at 8 kHz is an integer delay.
    let d = 56.0 * SPEED_OF_SOUND / 8000.0;
    let src = [1.0, 2.0, 1.5];
    let mic = [1.0 + d, 2.0, 1.5];
    let h = image_method_rir(&ROOM, src, mic, &opts(0)).unwrap();
    assert_eq!(argmax(&h), 56);
    assert!((h[56] - 1.0 / (4.0 * PI * d)).abs() < 1e-15);
    let rest: f64 = h.iter().enumerate().filter(|&(i, _)| i != 56).map(|(_, v)| v.abs()).fold(0.0, f64::max);
    assert!(rest < 1e-15 * h[56].abs().max(1.0), "off-peak {rest}");
}

#[test]
fn order_zero_delay_rounds_fractional_distance() {
    for d in [0.73, 1.111, 2.5, 3.9] {
        let h = image_method_rir(&ROOM, [1.0, 1.0, 1.0], [1.0 + d, 1.0, 1.0], &opts(0)).unwrap();
        assert_eq!(argmax(&h), (8000.0 * d / SPEED_OF_SOUND).round() as usize, "d = {d}");
    }
}

#[test]
fn doubling_distance_halves_amplitude() {
    let unit = SPEED_OF_SOUND / 8000.0;
    let near = image_method_rir(&ROOM, [0.5, 1.0, 1.0], [0.5 + 20.0 * unit, 1.0, 1.0], &opts(0)).unwrap();
    let far = image_method_rir(&ROOM, [0.5, 1.0, 1.0], [0.5 + 40.0 * unit, 1.0, 1.0], &opts(0)).unwrap();
    assert!((far[40] / near[20] - 0.5).abs() < 1e-12);
}

#[test]
fn first_order_count_and_wall_image() {
    // Order 1 adds exactly the six wall images; the x = 0 wall image of a
    // source at x = 1 lies at x = −1.
    let src = [1.0, 2.5, 1.5];
    let mic = [3.0, 2.5, 1.5];
    let h0 = image_method_rir(&ROOM, src, mic, &opts(0)).unwrap();
    let h1 = image_method_rir(&ROOM, src, mic, &opts(1)).unwrap();
    let beta = ROOM.reflection();
    let d = 4.0;
    let i = (8000.0 * d / SPEED_OF_SOUND).round() as usize;
    let frac = 8000.0 * d / SPEED_OF_SOUND - i as f64;
    let w = 0.5 * (1.0 + (PI * frac / SINC_HALF_WIDTH as f64).cos());
    let expected_tap = beta / (4.0 * PI * d) * w * sinc(-frac);
    // Other images near the same delay are absent: next-nearest wall image is
    // the x = 6 wall at distance 8.
    let diff: Vec<f64> = h1.iter().zip(h0.iter().chain(std::iter::repeat(&0.0))).map(|(a, b)| a - b).collect();
    let others: f64 = [
        distance([1.0, -2.5, 1.5], mic),
        distance([1.0, 7.5, 1.5], mic),
        distance([1.0, 2.5, -1.5], mic),
        distance([1.0, 2.5, 4.5], mic),
        distance([11.0, 2.5, 1.5], mic),
    ]
    .iter()
    .map(|&e| {
        let x = i as f64 - 8000.0 * e / SPEED_OF_SOUND;
        if x.abs() < SINC_HALF_WIDTH as f64 {
            beta / (4.0 * PI * e) * 0.5 * (1.0 + (PI * x / SINC_HALF_WIDTH as f64).cos()) * sinc(x)
        } else {
            0.0
        }
    })
    .sum();
    assert!((diff[i] - expected_tap - others).abs() < 1e-12, "{} vs {}", diff[i], expected_tap + others);
}

/// Schroeder backward integration, then a line fit between −5 and −25 dB
/// extrapolated to −60 dB.
fn schroeder_t60(h: &[f64], fs: f64) -> f64 {
    let mut edc: Vec<f64> = h.iter().map(|v| v * v).collect();
    for i in (0..edc.len() - 1).rev() {
        edc[i] += edc[i + 1];
    }
    let total = edc[0];
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, &e)| (i as f64 / fs, 10.0 * (e / total).log10()))
        .filter(|&(_, db)| (-25.0..=-5.0).contains(&db))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -60.0 / (sxy / sxx)
}

#[test]
fn energy_decay_matches_target_rt60() {
    let order = 40;
    let h = image_method_rir(&ROOM, [1.3, 3.1, 1.2], [4.2, 2.0, 1.7], &opts(order)).unwrap();
    // Keep only the span where every image up to the order limit is present.
    let inv: f64 = ROOM.dims.iter().map(|l| 1.0 / (l * l)).sum::<f64>().sqrt();
    let complete = (order as f64 / inv / SPEED_OF_SOUND * 8000.0) as usize;
    let t60 = schroeder_t60(&h[..complete.min(h.len())], 8000.0);
    assert!((t60 - ROOM.rt60).abs() <= 0.2 * ROOM.rt60, "measured {t60}");
}

#[test]
fn image_cap_limits_energy() {
    let src = [1.3, 3.1, 1.2];
    let mic = [4.2, 2.0, 1.7];
    let full = image_method_rir(&ROOM, src, mic, &opts(6)).unwrap();
    let capped = image_method_rir(&ROOM, src, mic, &RirOptions { max_images: 7, ..opts(6) }).unwrap();
    let one = image_method_rir(&ROOM, src, mic, &opts(1)).unwrap();
    assert_eq!(capped.len(), one.len());
    assert!(capped.iter().zip(&one).all(|(a, b)| (a - b).abs() < 1e-15));
    assert!(full.len() > capped.len());
}

#[test]
fn rir_rejects_outside_points_and_bad_rt60() {
    let bad = Room { rt60: 0.0, ..ROOM };
    assert!(matches!(image_method_rir(&bad, [1.0; 3], [2.0; 3], &opts(0)), Err(SceneError::Geometry(_))));
    assert!(matches!(image_method_rir(&ROOM, [7.0, 1.0, 1.0], [2.0; 3], &opts(0)), Err(SceneError::Geometry(_))));
}

#[test]
fn sabine_absorption() {
    let alpha = ROOM.absorption();
    assert!((alpha - 0.161 * 90.0 / (126.0 * 0.5)).abs() < 1e-15);
    assert!((ROOM.reflection().powi(2) - (1.0 - alpha)).abs() < 1e-15);
}

#[test]
fn convolve_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..37).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..11).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = convolve(&a, &b, 50);
    for (n, v) in c.iter().enumerate() {
        let direct: f64 = (0..b.len()).filter(|&k| n >= k && n - k < a.len()).map(|k| a[n - k] * b[k]).sum();
        assert!((v - direct).abs() < 1e-12);
    }
}

#[test]
fn sample_scene_is_deterministic_and_spaced() {
    let cfg = SceneConfig { sources: [3, 4], ..SceneConfig::paper() };
    for seed in 0..20 {
        let a = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(a, b);
        for (i, &s) in a.sources.iter().enumerate() {
            assert!(a.room.contains(s, cfg.wall_margin));
            assert!(distance(s, a.array_center) >= cfg.min_array_distance);
            for &t in &a.sources[..i] {
                assert!(distance(s, t) >= 1.0);
            }
        }
        for &m in &a.mics {
            assert!(distance(m, a.array_center) <= cfg.array_radius + 1e-12);
            assert!(a.room.contains(m, cfg.wall_margin));
        }
        assert!((3..=4).contains(&a.sources.len()));
        assert!((0.2..=0.6).contains(&a.room.rt60));
        for ax in 0..3 {
            assert!((cfg.room_min[ax]..=cfg.room_max[ax]).contains(&a.room.dims[ax]));
        }
    }
}

#[test]
fn infeasible_spacing_is_reported() {
    let cfg = SceneConfig { min_source_spacing: 100.0, ..SceneConfig::desk() };
    let err = sample_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, SceneError::Infeasible { attempts: MAX_ATTEMPTS, .. }), "{err}");
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = SceneConfig { room_min: [11.0, 5.0, 3.0], ..SceneConfig::desk() };
    assert!(matches!(cfg.validate(), Err(SceneError::Config(_))));
    let cfg = SceneConfig { rt60: [0.0, 0.1], ..SceneConfig::desk() };
    assert!(matches!(cfg.validate(), Err(SceneError::Config(_))));
}

fn unit_distance_geometry() -> SceneGeometry {
    let room = Room { dims: [6.0, 5.0, 3.0], rt60: 0.3 };
    SceneGeometry { room, array_center: [3.0, 2.5, 1.5], mics: vec![[3.0, 2.5, 1.5]], sources: vec![[2.0, 2.5, 1.5]] }
}

#[test]
fn single_source_image_is_delayed_scaled_dry_signal() {
    let cfg = SceneConfig { snr_db: None, gain_db: [0.0, 0.0], ..SceneConfig::desk().anechoic() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dry = synth_speech(&mut rng, 8000, 4000);
    let scene = render_mixture(&unit_distance_geometry(), std::slice::from_ref(&dry), &cfg, &mut rng).unwrap();
    let tau = 8000.0 / SPEED_OF_SOUND;
    let h = &scene.rirs[0][0];
    // Reconstruct with the RIR's own samples: windowed-sinc interpolation of
    // the dry signal at the fractional delay, then the power normalization.
    let shifted: Vec<f64> = (0..dry.len())
        .map(|i| {
            (0..h.len()).filter(|&k| k <= i).map(|k| dry[i - k] * h[k]).sum::<f64>()
        })
        .collect();
    let p = shifted.iter().map(|v| v * v).sum::<f64>() / shifted.len() as f64;
    let img = scene.images[0].channel(0);
    for (a, b) in img.iter().zip(&shifted) {
        assert!((a - b / p.sqrt()).abs() < 1e-9);
    }
    assert_eq!(argmax(h), tau.round() as usize);
    // The peak tap is close to 1/(4π) scaled by the sinc at the fractional offset.
    assert!((h[argmax(h)] - sinc(tau.round() - tau) / (4.0 * PI)).abs() < 1e-3);
    assert_eq!(scene.noise.channels().iter().flatten().filter(|&&v| v != 0.0).count(), 0);
}

#[test]
fn mixture_is_images_plus_noise_bit_exact() {
    let cfg = SceneConfig::desk();
    let scene = generate_scene(&cfg, 11).unwrap();
    for m in 0..cfg.mics {
        for i in 0..scene.mixture.len() {
            let sum = scene.images.iter().fold(0.0, |acc, w| acc + w.channel(m)[i]);
            assert_eq!(scene.mixture.channel(m)[i], sum + scene.noise.channel(m)[i]);
        }
    }
}

#[test]
fn configured_snr_is_met() {
    for seed in 0..4 {
        let scene = generate_scene(&SceneConfig::desk(), seed).unwrap();
        assert!((scene.measured_snr_db() - 30.0).abs() < 0.1);
    }
}

#[test]
fn gains_set_image_power() {
    let cfg = SceneConfig::desk();
    let scene = generate_scene(&cfg, 5).unwrap();
    for (img, g) in scene.images.iter().zip(&scene.gains_db) {
        assert!((-2.5..=2.5).contains(g));
        let p = img.channels().iter().flatten().map(|v| v * v).sum::<f64>() / (img.len() * img.num_channels()) as f64;
        assert!((10.0 * p.log10() - g).abs() < 1e-9);
    }
}

#[test]
fn direct_path_delay_matches_geometry() {
    let cfg = SceneConfig::desk();
    let scene = generate_scene(&cfg, 2).unwrap();
    for (n, src) in scene.geometry.sources.iter().enumerate() {
        for (m, mic) in scene.geometry.mics.iter().enumerate() {
            let tau = 8000.0 * distance(*src, *mic) / SPEED_OF_SOUND;
            let h = &scene.rirs[n][m];
            let first = h.iter().position(|v| v.abs() > 0.5 * h.iter().fold(0.0_f64, |a, b| a.max(b.abs()))).unwrap();
            assert!((first as f64 - tau).abs() <= 1.0, "src {n} mic {m}: {first} vs {tau}");
        }
    }
}

#[test]
fn generate_scene_is_deterministic() {
    let cfg = SceneConfig::desk();
    let a = generate_scene(&cfg, 9).unwrap();
    let b = generate_scene(&cfg, 9).unwrap();
    assert_eq!(a.mixture, b.mixture);
    assert_eq!(a.gains_db, b.gains_db);
    assert_ne!(generate_scene(&cfg, 10).unwrap().mixture, a.mixture);
}

#[test]
fn silent_or_mismatched_sources_are_rejected() {
    let cfg = SceneConfig::desk().anechoic();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = unit_distance_geometry();
    assert!(matches!(render_mixture(&g, &[vec![0.0; 100]], &cfg, &mut rng), Err(SceneError::SilentSource { index: 0 })));
    let mut two = g.clone();
    two.sources.push([4.5, 2.5, 1.5]);
    assert!(matches!(
        render_mixture(&two, &[vec![1.0; 100], vec![1.0; 90]], &cfg, &mut rng),
        Err(SceneError::LengthMismatch { index: 1, .. })
    ));
}

#[test]
fn synth_speech_is_unit_rms_with_pauses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = synth_speech(&mut rng, 8000, 24000);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    assert!((rms - 1.0).abs() < 1e-12);
    // Frame energies vary strongly, as with syllables and pauses.
    let frames: Vec<f64> = x.chunks(400).map(|c| c.iter().map(|v| v * v).sum::<f64>()).collect();
    let quiet = frames.iter().filter(|&&e| e < 1e-2 * 400.0).count();
    assert!(quiet >= 3, "{quiet} quiet frames");
}

#[test]
fn scene_seed_spreads() {
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| scene_seed(7, i)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
}

#[test]
fn metadata_round_trips_through_json() {
    let cfg = SceneConfig::desk();
    let scene = generate_scene(&cfg, 1).unwrap();
    let meta = scene.metadata("scene-0001", 1, &cfg);
    let text = serde_json::to_string(&meta).unwrap();
    let back: SceneMetadata = serde_json::from_str(&text).unwrap();
    assert_eq!(back, meta);
    assert_eq!(back.samples, cfg.samples());
}
