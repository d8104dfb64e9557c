use gesturegen::synthetic_data::{
    generate_clip, generate_dataset, generate_with_beats, list_clips, read_clip, read_dataset,
    write_clip, SceneSpec, AUDIO_DIM,
};
use gesturegen::Error;
use std::fs;

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_clip(&SceneSpec::default(), 2.0, 11).unwrap();
    write_clip(&clip, dir.path()).unwrap();
    assert_eq!(read_clip(dir.path()).unwrap(), clip);
}

#[test]
fn missing_audio_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(
        &generate_clip(&SceneSpec::default(), 1.0, 0).unwrap(),
        dir.path(),
    )
    .unwrap();
    fs::remove_file(dir.path().join("audio.csv")).unwrap();
    match read_clip(dir.path()) {
        Err(e @ Error::Parse { .. }) => {
            assert!(e.to_string().contains("audio.csv not found"), "{e}")
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_audio_row_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(
        &generate_clip(&SceneSpec::default(), 1.0, 0).unwrap(),
        dir.path(),
    )
    .unwrap();
    let path = dir.path().join("audio.csv");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replacen("\n0,", "\n0,x,", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(read_clip(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn unknown_files_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_clip(&SceneSpec::default(), 1.0, 4).unwrap();
    write_clip(&clip, dir.path()).unwrap();
    fs::write(dir.path().join("notes.txt"), "hello").unwrap();
    fs::write(dir.path().join("frames").join("thumbnail.jpg"), [0u8; 4]).unwrap();
    assert_eq!(read_clip(dir.path()).unwrap(), clip);
}

#[test]
fn four_seconds_at_ten_fps() {
    let clip = generate_clip(&SceneSpec::default(), 4.0, 1).unwrap();
    assert_eq!(
        (clip.frames.len(), clip.audio.len(), clip.regions.len()),
        (40, 40, 40)
    );
    assert!(clip.audio.iter().all(|r| r.len() == AUDIO_DIM));
    for (f, r) in clip.frames.iter().zip(&clip.regions) {
        assert!(r.validate(f.height(), f.width()).is_ok());
    }
}

#[test]
fn same_seed_same_clip() {
    let spec = SceneSpec::default();
    assert_eq!(
        generate_clip(&spec, 3.0, 21).unwrap(),
        generate_clip(&spec, 3.0, 21).unwrap()
    );
    assert_ne!(
        generate_clip(&spec, 3.0, 21).unwrap().frames,
        generate_clip(&spec, 3.0, 22).unwrap().frames
    );
}

#[test]
fn given_beats_land_on_frames() {
    let (clip, poses) =
        generate_with_beats(&SceneSpec::default(), 2.0, &[0.5, 1.0, 1.5], 0).unwrap();
    assert_eq!(clip.beat_frames(), vec![5, 10, 15]);
    let a: Vec<f64> = poses.iter().map(|p| p.right_shoulder).collect();
    let peaks: Vec<usize> = (1..a.len() - 1)
        .filter(|&i| a[i] > a[i - 1] && a[i] > a[i + 1])
        .collect();
    assert_eq!(peaks, vec![5, 10, 15]);
}

#[test]
fn dataset_round_trip_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let clips = generate_dataset(&SceneSpec::default(), 3, 1.0, 5).unwrap();
    for c in &clips {
        write_clip(c, &dir.path().join(&c.id)).unwrap();
    }
    fs::create_dir(dir.path().join("not_a_clip")).unwrap();
    assert_eq!(list_clips(dir.path()).unwrap().len(), 3);
    let back = read_dataset(dir.path()).unwrap();
    let ids: Vec<&str> = back.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["clip_0000", "clip_0001", "clip_0002"]);
    assert_eq!(back, clips);
}
