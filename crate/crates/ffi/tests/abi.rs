use std::ffi::{CStr, CString};
use std::ptr;

use markov_icl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mic_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn batch(p: f64, d: usize, n: usize, count: usize, seed: u64) -> *mut MicPromptBatch {
    let mut b = ptr::null_mut();
    assert_eq!(
        unsafe { mic_prompt_batch_sample_binary(p, d, n, count, seed, &mut b) },
        MicStatus::Ok
    );
    b
}

fn model(form: MicParamForm, d: usize, n: usize, layers: usize, seed: u64) -> *mut MicModel {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { mic_model_random(form, d, n, layers, 0.1, seed, &mut m) },
        MicStatus::Ok
    );
    m
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(mic_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_handles_are_reported() {
    let mut out = 0.0;
    let s = unsafe { mic_model_loss(ptr::null(), ptr::null(), &mut out) };
    assert_eq!(s, MicStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { mic_model_num_params(ptr::null()) }, 0);
    unsafe { mic_model_free(ptr::null_mut()) };
    unsafe { mic_prompt_batch_free(ptr::null_mut()) };
}

#[test]
fn invalid_arguments_map_to_codes() {
    let mut b = ptr::null_mut();
    let s = unsafe { mic_prompt_batch_sample_binary(1.5, 2, 4, 3, 0, &mut b) };
    assert_eq!(s, MicStatus::InvalidArgument);
    assert!(b.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn batch_accessors_round_trip() {
    let b = batch(0.5, 2, 4, 3, 7);
    unsafe {
        assert_eq!(mic_prompt_batch_len(b), 3);
        let mut labels = [0.0; 3];
        assert_eq!(
            mic_prompt_batch_labels(b, labels.as_mut_ptr(), 3),
            MicStatus::Ok
        );
        assert!(labels.iter().all(|&y| y == 0.0 || y == 1.0));

        let mut z = [9.0; 15];
        assert_eq!(
            mic_prompt_batch_embedding(b, 1, z.as_mut_ptr(), 14),
            MicStatus::BufferTooSmall
        );
        assert_eq!(
            mic_prompt_batch_embedding(b, 1, z.as_mut_ptr(), 15),
            MicStatus::Ok
        );
        // Column-major (d+1) x (n+1): the query label slot is the last entry.
        assert_eq!(z[14], 0.0);
        assert_eq!(
            mic_prompt_batch_embedding(b, 3, z.as_mut_ptr(), 15),
            MicStatus::InvalidArgument
        );
        mic_prompt_batch_free(b);
    }
}

#[test]
fn batch_from_chains_keeps_label() {
    // One prompt, n = 2 context chains of length d + 1 = 2, then the query.
    let chains: [u32; 6] = [0, 1, 1, 1, 1, 0];
    let mut b = ptr::null_mut();
    unsafe {
        assert_eq!(
            mic_prompt_batch_from_chains(chains.as_ptr(), 1, 2, 1, 2, &mut b),
            MicStatus::Ok
        );
        let mut y = [9.0];
        assert_eq!(mic_prompt_batch_labels(b, y.as_mut_ptr(), 1), MicStatus::Ok);
        assert_eq!(y[0], 0.0);
        let mut z = [9.0; 6];
        assert_eq!(
            mic_prompt_batch_embedding(b, 0, z.as_mut_ptr(), 6),
            MicStatus::Ok
        );
        assert_eq!(z, [0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        mic_prompt_batch_free(b);

        let bad: [u32; 6] = [0, 1, 1, 5, 1, 0];
        let s = mic_prompt_batch_from_chains(bad.as_ptr(), 1, 2, 1, 2, &mut b);
        assert_ne!(s, MicStatus::Ok);
    }
}

#[test]
fn params_set_get_and_predict() {
    let m = model(MicParamForm::Sparse, 2, 4, 2, 1);
    let b = batch(0.5, 2, 4, 5, 2);
    unsafe {
        let k = mic_model_num_params(m);
        assert_eq!(k, 2 * (3 + 6));
        let zeros = vec![0.0; k];
        assert_eq!(
            mic_model_set_params(m, zeros.as_ptr(), k - 1),
            MicStatus::ShapeMismatch
        );
        assert_eq!(mic_model_set_params(m, zeros.as_ptr(), k), MicStatus::Ok);
        let mut got = vec![1.0; k];
        assert_eq!(mic_model_get_params(m, got.as_mut_ptr(), k), MicStatus::Ok);
        assert_eq!(got, zeros);
        let mut preds = [1.0; 5];
        assert_eq!(
            mic_model_predict(m, b, preds.as_mut_ptr(), 5),
            MicStatus::Ok
        );
        assert_eq!(preds, [0.0; 5]);
        mic_model_free(m);
        mic_prompt_batch_free(b);
    }
}

#[test]
fn training_lowers_loss_and_checkpoint_round_trips() {
    let m = model(MicParamForm::Sparse, 1, 10, 1, 3);
    let b = batch(0.3, 1, 10, 200, 4);
    let dir = std::env::temp_dir().join(format!("mic-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = CString::new(dir.join("model.txt").to_str().unwrap()).unwrap();
    unsafe {
        let mut trace = vec![0.0; 200];
        assert_eq!(
            mic_model_train(m, b, 0.01, 200, 1, trace.as_mut_ptr(), trace.len()),
            MicStatus::Ok
        );
        assert!(trace[199] < trace[0]);

        let mut before = 0.0;
        assert_eq!(mic_model_loss(m, b, &mut before), MicStatus::Ok);
        assert_eq!(mic_model_save(m, path.as_ptr()), MicStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(mic_model_load(path.as_ptr(), &mut loaded), MicStatus::Ok);
        let mut after = 0.0;
        assert_eq!(mic_model_loss(loaded, b, &mut after), MicStatus::Ok);
        assert_eq!(before, after);

        let missing = CString::new(dir.join("missing.txt").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(mic_model_load(missing.as_ptr(), &mut none), MicStatus::Io);

        mic_model_free(m);
        mic_model_free(loaded);
        mic_prompt_batch_free(b);
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn forward_equivalence_holds_for_restricted_models() {
    let m = model(MicParamForm::Restricted, 3, 8, 3, 5);
    let b = batch(0.5, 3, 8, 4, 6);
    unsafe {
        let mut dev = f64::NAN;
        assert_eq!(mic_forward_equiv_check(m, b, &mut dev), MicStatus::Ok);
        assert!(dev < 1e-10, "deviation {dev}");
        mic_model_free(m);
        mic_prompt_batch_free(b);
    }
}

#[test]
fn xstar_then_recover_reproduces_target() {
    let mut x = [0.0; 3];
    unsafe {
        assert_eq!(mic_xstar_len2_iid(0.5, 100, x.as_mut_ptr()), MicStatus::Ok);
        let (mut b, mut a, mut disc) = ([0.0; 2], [0.0; 2], f64::NAN);
        assert_eq!(
            mic_recover_pq_len2(x.as_ptr(), b.as_mut_ptr(), a.as_mut_ptr(), &mut disc),
            MicStatus::Ok
        );
        // phi(b, A) for d = 1: (b1 a1, b1 a2 + b2 a1, b2 a2).
        let phi = [b[0] * a[0], b[0] * a[1] + b[1] * a[0], b[1] * a[1]];
        for (p, t) in phi.iter().zip(&x) {
            assert!((p - t).abs() < 1e-9 * (1.0 + t.abs()), "{phi:?} vs {x:?}");
        }

        let target = [1.0, 0.0, 1.0];
        let s = mic_recover_pq_len2(target.as_ptr(), b.as_mut_ptr(), a.as_mut_ptr(), &mut disc);
        assert_eq!(s, MicStatus::NoRealPreimage);
        assert!(disc < 0.0);
    }
}
