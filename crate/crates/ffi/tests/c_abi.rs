use std::ffi::{CStr, CString};
use std::ptr;

use mixlab_ffi::*;

fn last_error() -> String {
    let p = mix_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_policy(scheme: &str, arch: &str, seed: u64) -> *mut MixPolicy {
    let (s, a) = (CString::new(scheme).unwrap(), CString::new(arch).unwrap());
    let mut p = ptr::null_mut();
    let st = unsafe { mix_policy_new(s.as_ptr(), a.as_ptr(), seed, &mut p) };
    assert_eq!(st, MixStatus::Ok, "{}", last_error());
    assert!(!p.is_null());
    p
}

fn act(p: *const MixPolicy, noise: &[f64]) -> (MixStatus, Vec<f64>) {
    let pos = [0.2, 0.3, 0.4, 0.7, 0.6, 0.5];
    let labels = [3u32, 5];
    let mut out = vec![0.0; noise.len()];
    let st = unsafe {
        mix_policy_act(
            p,
            pos.as_ptr(),
            labels.as_ptr(),
            2,
            1,
            noise.as_ptr(),
            out.as_mut_ptr(),
            out.len(),
        )
    };
    (st, out)
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(mix_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn unknown_scheme_sets_config_status_and_message() {
    let (s, a) = (
        CString::new("nope").unwrap(),
        CString::new("groot").unwrap(),
    );
    let mut p = ptr::null_mut();
    let st = unsafe { mix_policy_new(s.as_ptr(), a.as_ptr(), 1, &mut p) };
    assert_eq!(st, MixStatus::Config);
    assert!(p.is_null());
    assert!(last_error().contains("nope"));
}

#[test]
fn null_arguments_are_rejected() {
    let a = CString::new("groot").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { mix_policy_new(ptr::null(), a.as_ptr(), 1, &mut p) },
        MixStatus::NullPointer
    );
    assert!(last_error().contains("scheme"));
    let mut t = 0;
    assert_eq!(
        unsafe { mix_policy_chunk_dims(ptr::null(), &mut t, &mut t) },
        MixStatus::NullPointer
    );
    unsafe { mix_policy_free(ptr::null_mut()) };
}

#[test]
fn act_is_deterministic_and_checks_buffer_length() {
    let p = new_policy("gated_fusion", "groot", 4);
    let (mut t, mut d) = (0, 0);
    assert_eq!(
        unsafe { mix_policy_chunk_dims(p, &mut t, &mut d) },
        MixStatus::Ok
    );
    assert_eq!((t, d), (4, 7));
    let noise: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect();
    let (st, a) = act(p, &noise);
    assert_eq!(st, MixStatus::Ok, "{}", last_error());
    let (_, b) = act(p, &noise);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));

    let (st, _) = act(p, &noise[..5]);
    assert_eq!(st, MixStatus::InvalidArgument);
    unsafe { mix_policy_free(p) };
}

#[test]
fn out_of_range_target_is_a_config_error_not_a_panic() {
    let p = new_policy("none", "pi", 2);
    let pos = [0.5; 3];
    let labels = [3u32];
    let noise = vec![0.0; 28];
    let mut out = vec![0.0; 28];
    let st = unsafe {
        mix_policy_act(
            p,
            pos.as_ptr(),
            labels.as_ptr(),
            1,
            9,
            noise.as_ptr(),
            out.as_mut_ptr(),
            28,
        )
    };
    assert_ne!(st, MixStatus::Ok);
    assert_ne!(st, MixStatus::Panic);
    unsafe { mix_policy_free(p) };
}

#[test]
fn save_load_round_trip_preserves_actions() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("p.bin").to_str().unwrap()).unwrap();
    for scheme in ["none", "ae_fusion", "crossattn_fusion", "spatial_forcing"] {
        let p = new_policy(scheme, "pi", 9);
        assert_eq!(
            unsafe { mix_policy_save(p, path.as_ptr()) },
            MixStatus::Ok,
            "{}",
            last_error()
        );
        let mut q = ptr::null_mut();
        assert_eq!(
            unsafe { mix_policy_load(path.as_ptr(), &mut q) },
            MixStatus::Ok,
            "{}",
            last_error()
        );
        let noise: Vec<f64> = (0..28).map(|i| 0.1 * i as f64 - 1.0).collect();
        let (sa, a) = act(p, &noise);
        let (sb, b) = act(q, &noise);
        assert_eq!(
            (sa, sb),
            (MixStatus::Ok, MixStatus::Ok),
            "{scheme}: {}",
            last_error()
        );
        assert_eq!(a, b, "{scheme}");
        unsafe {
            mix_policy_free(p);
            mix_policy_free(q);
        }
    }
}

#[test]
fn loading_garbage_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("junk.bin");
    std::fs::write(&file, b"not a checkpoint").unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut q = ptr::null_mut();
    assert_eq!(
        unsafe { mix_policy_load(path.as_ptr(), &mut q) },
        MixStatus::Checkpoint
    );
    assert!(q.is_null());
}

#[test]
fn gate_and_fuse_matches_hand_computation() {
    let (b, l, n, d) = (2, 3, 2, 4);
    let h: Vec<f64> = (0..b * l * d).map(|i| (i as f64 * 0.7).cos()).collect();
    let f: Vec<f64> = (0..b * n * d).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    // Zero gate weights put every gate at one half.
    let w_gate = vec![0.0; 2 * d * d];
    let mut cond = vec![0.0; b * (l + n) * d];
    let mut gate = vec![0.0; b * n * d];
    let st = unsafe {
        mix_gate_and_fuse(
            h.as_ptr(),
            f.as_ptr(),
            b,
            l,
            n,
            d,
            w_gate.as_ptr(),
            eye.as_ptr(),
            eye.as_ptr(),
            cond.as_mut_ptr(),
            gate.as_mut_ptr(),
        )
    };
    assert_eq!(st, MixStatus::Ok, "{}", last_error());
    assert!(gate.iter().all(|&g| g == 0.5));
    for bi in 0..b {
        for t in 0..l {
            for k in 0..d {
                assert_eq!(cond[(bi * (l + n) + t) * d + k], h[(bi * l + t) * d + k]);
            }
        }
        for j in 0..n {
            for k in 0..d {
                let mean = (0..l).map(|t| h[(bi * l + t) * d + k]).sum::<f64>() / l as f64;
                let want = 0.5 * mean + 0.5 * f[(bi * n + j) * d + k];
                let got = cond[(bi * (l + n) + l + j) * d + k];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    // The gate output is optional.
    let st = unsafe {
        mix_gate_and_fuse(
            h.as_ptr(),
            f.as_ptr(),
            b,
            l,
            n,
            d,
            w_gate.as_ptr(),
            eye.as_ptr(),
            eye.as_ptr(),
            cond.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, MixStatus::Ok);
}

#[test]
fn run_experiment_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(
        "scheme = concat_fusion\nsteps = 3\ndataset_size = 16\neval_episodes = 4\nbatch_size = 4\n",
    )
    .unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let st = unsafe { mix_run_experiment(cfg.as_ptr(), out.as_ptr()) };
    assert_eq!(st, MixStatus::Ok, "{}", last_error());
    let report = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(report.contains("Concat-Fusion"), "{report}");

    let bad = CString::new("steps = -1\n").unwrap();
    assert_eq!(
        unsafe { mix_run_experiment(bad.as_ptr(), out.as_ptr()) },
        MixStatus::Config
    );
}

#[test]
fn header_declares_every_entry_point() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mixlab.h")).unwrap();
    for f in [
        "mix_last_error",
        "mix_version",
        "mix_policy_new",
        "mix_policy_load",
        "mix_policy_save",
        "mix_policy_free",
        "mix_policy_chunk_dims",
        "mix_policy_act",
        "mix_gate_and_fuse",
        "mix_run_experiment",
        "MIX_STATUS_PANIC",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}
