use spiffnet::checkpoint::Checkpoint;
use spiffnet::model::{Model, ModelConfig};
use spiffnet_web::ops;

#[test]
fn rgba_round_trip_drops_alpha_only() {
    let rgba = ops::scene(10, 6, 4);
    assert_eq!(rgba.len(), 10 * 6 * 4);
    let img = ops::from_rgba(&rgba, 10, 6).unwrap();
    assert_eq!(img.shape(), &[6, 10, 3]);
    assert_eq!(ops::to_rgba(&img), rgba);
    assert!(ops::from_rgba(&rgba, 10, 5).is_err());
}

#[test]
fn interpolation_sizes_and_constants() {
    let flat: Vec<u8> = [90u8, 140, 200, 255].repeat(8 * 8);
    for method in ["bicubic", "bilinear"] {
        let up = ops::upscale(&flat, 8, 8, 3, method).unwrap();
        assert_eq!(up, [90u8, 140, 200, 255].repeat(24 * 24));
    }
    assert!(ops::upscale(&flat, 8, 8, 2, "nearest").is_err());
    assert_eq!(ops::downscale(&flat, 8, 8, 2).unwrap().len(), 4 * 4 * 4);
}

#[test]
fn untrained_network_equals_bilinear() {
    let lr = ops::scene(12, 12, 2);
    let (r, sr) = ops::super_resolve(&lr, 12, 12, None).unwrap();
    assert_eq!(r, 2);
    assert_eq!(sr, ops::upscale(&lr, 12, 12, 2, "bilinear").unwrap());
}

#[test]
fn checkpoint_bytes_drive_the_network() {
    let m = Model::<f32>::init(ModelConfig::toy(3), 1).unwrap();
    let bytes = Checkpoint::from_model(&m, None, &[]).to_bytes().unwrap();
    let lr = ops::scene(8, 10, 5);
    let (r, sr) = ops::super_resolve(&lr, 8, 10, Some(&bytes)).unwrap();
    assert_eq!((r, sr.len()), (3, 24 * 30 * 4));
    assert!(ops::super_resolve(&lr, 8, 10, Some(&bytes[..20])).is_err());
}

#[test]
fn param_count_accepts_presets_and_text() {
    let full = ops::param_count("default").unwrap();
    assert_eq!(ops::param_count("enable_cspia = true\n").unwrap(), full);
    assert!(ops::param_count("enable_cspia = false").unwrap() < full);
    assert!(ops::param_count("wings = 2").is_err());
}

#[test]
fn psnr_of_identical_is_infinite() {
    let a = ops::scene(12, 12, 0);
    assert_eq!(ops::psnr(&a, &a, 12, 12).unwrap(), f64::INFINITY);
}
