use std::io::{BufReader, Cursor};

use markov_icl::lsa::{read_checkpoint, write_checkpoint, LsaModel, ParamForm};
use markov_icl::markov_data::{read_prompt_batch, write_prompt_batch, PromptSampler};
use markov_icl::reparam::{read_reparam_csv, write_reparam_csv, ReparamVector};
use markov_icl::Error;
use nalgebra::DVector;

#[test]
fn prompt_batch_survives_a_file_round_trip() {
    let sampler = PromptSampler::binary(0.3, 3, 5, 11).unwrap();
    let records = sampler.batch_with_kernels(0, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.csv");
    write_prompt_batch(std::fs::File::create(&path).unwrap(), &records, 11).unwrap();

    let back = read_prompt_batch(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back.seed, 11);
    assert_eq!(back.records, records);
}

#[test]
fn prompt_batch_rejects_truncated_rows() {
    let sampler = PromptSampler::binary(0.5, 1, 2, 0).unwrap();
    let mut buf = Vec::new();
    write_prompt_batch(&mut buf, &sampler.batch_with_kernels(0, 1), 0).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let cut = text.trim_end().rsplit_once(',').unwrap().0.to_string();
    assert!(matches!(
        read_prompt_batch(Cursor::new(cut)),
        Err(Error::Parse(_) | Error::ShapeMismatch(_))
    ));
}

#[test]
fn empty_prompt_batch_is_rejected() {
    assert!(write_prompt_batch(Vec::new(), &[], 0).is_err());
}

#[test]
fn checkpoints_round_trip_for_every_form() {
    let prompts = PromptSampler::binary(0.5, 2, 6, 1).unwrap().batch(0, 20);
    for form in [ParamForm::Dense, ParamForm::Sparse, ParamForm::Restricted] {
        let m = LsaModel::random(form, 2, 6, 3, 0.2, 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        let back = read_checkpoint(Cursor::new(buf)).unwrap();
        assert_eq!(back.form(), form);
        assert_eq!(back.to_vec(), m.to_vec());
        assert_eq!(back.loss(&prompts).unwrap(), m.loss(&prompts).unwrap());
    }
}

#[test]
fn checkpoint_with_wrong_parameter_count_fails() {
    let m = LsaModel::random(ParamForm::Sparse, 1, 4, 1, 0.1, 0).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &m).unwrap();
    let mut text = String::from_utf8(buf).unwrap();
    let last = text.trim_end().rfind('\n').unwrap();
    text.truncate(last + 1);
    assert!(read_checkpoint(Cursor::new(text)).is_err());
}

#[test]
fn reparam_csv_keeps_annotations_and_values() {
    let x = ReparamVector::new(2, DVector::from_fn(12, |i, _| i as f64 * 0.25 - 1.0)).unwrap();
    let mut buf = Vec::new();
    write_reparam_csv(&mut buf, &x).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("j,i,k,value"));
    assert_eq!(text.lines().nth(1), Some("1,1,1,-1"));
    assert_eq!(read_reparam_csv(Cursor::new(buf)).unwrap(), x);
}

#[test]
fn reparam_csv_rejects_garbage() {
    assert!(read_reparam_csv(Cursor::new("j,i,k,value\n1,1,1,abc\n")).is_err());
}
