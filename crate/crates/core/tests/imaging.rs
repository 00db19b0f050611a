mod common;

use common::*;
use rand::Rng;
use saliency::imaging::{decode_png, decode_pnm, encode_png, encode_pnm, resize_bilinear};
use saliency::{read_image, render_attribution, render_overlay, write_image, Grid, Image, Method, PixelAttribution, Tensor};

#[test]
fn known_p6_bytes_decode_exactly() {
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    let raster = [255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30];
    bytes.extend(raster);
    let img = decode_pnm(&bytes).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 3));
    assert_eq!(img.pixel(0, 0), [255, 0, 0]);
    assert_eq!(img.pixel(1, 0), [0, 255, 0]);
    assert_eq!(img.pixel(0, 1), [0, 0, 255]);
    assert_eq!(img.pixel(1, 1), [10, 20, 30]);
    assert_eq!(encode_pnm(&img), bytes);
}

#[test]
fn header_comments_and_gray_files() {
    let img = decode_pnm(b"P5 # gray\n# size next\n3 1 255\n\x01\x02\x03").unwrap();
    assert_eq!((img.channels(), img.data()), (1, &[1u8, 2, 3][..]));
    assert_eq!(img.to_rgb().pixel(2, 0), [3, 3, 3]);
}

#[test]
fn fixture_ppms_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    for e in two_object_manifest().iter().take(20) {
        let path = fixture(&format!("two_object/{}", e.file));
        let original = std::fs::read(&path).unwrap();
        let img = read_image(&path).unwrap();
        let out = dir.path().join(&e.file);
        write_image(&img, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), original);
    }
}

#[test]
fn png_round_trips() {
    let mut rng = rng(18);
    for channels in [1, 3] {
        let data: Vec<u8> = (0..5 * 3 * channels).map(|_| rng.gen()).collect();
        let img = Image::new(5, 3, channels, data).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }
}

#[test]
fn malformed_images_are_categorized() {
    let good = {
        let mut b = b"P6\n2 2\n255\n".to_vec();
        b.extend([7; 12]);
        b
    };
    for len in 0..good.len() {
        assert_eq!(decode_pnm(&good[..len]).unwrap_err().category(), "ImageFormat");
    }
    for bad in [&b"P6\n2 2\n65535\n"[..], b"P3\n1 1\n255\n0 0 0", b"P6\n-1 2\n255\n", b"P6\n99999999999 99999999999\n255\n"] {
        assert_eq!(decode_pnm(bad).unwrap_err().category(), "ImageFormat");
    }
    assert!(decode_png(b"\x89PNG\r\n\x1a\nnope").is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jpg");
    std::fs::write(&path, b"\xff\xd8\xff").unwrap();
    assert_eq!(read_image(&path).unwrap_err().category(), "ImageFormat");
    assert_eq!(read_image(dir.path().join("missing.ppm")).unwrap_err().category(), "Io");
}

#[test]
fn resize_of_a_ramp_matches_hand_values() {
    // Rows are identical ramps 10, 40, 90, 140. Half-pixel centres put each
    // output pixel between two input columns, so 4 -> 2 averages pairs.
    let row = [10u8, 40, 90, 140];
    let img = Image::new(4, 4, 1, row.repeat(4)).unwrap();
    let half = resize_bilinear(&img, 2, 2).unwrap();
    assert_eq!(half.data(), [25, 115, 25, 115]);
    assert_eq!(resize_bilinear(&img, 4, 4).unwrap(), img);
}

#[test]
fn preprocessing_uses_spec_statistics() {
    let (spec, _) = toy("toy_gap");
    let pre = spec.preprocess();
    let img = Image::new(1, 1, 3, vec![0, 128, 255]).unwrap();
    let t = img.to_tensor::<f64>(&pre).unwrap();
    for (ch, &raw) in [0u8, 128, 255].iter().enumerate() {
        let want = (raw as f64 / 255.0 - pre.mean[ch]) / pre.std[ch];
        assert_eq!(t.data()[ch], want);
    }
    let gray = Image::new(1, 1, 1, vec![0]).unwrap();
    assert!(gray.to_tensor::<f64>(&pre).is_err());
}

#[test]
fn rendering_contracts() {
    let img = Image::new(2, 1, 3, vec![10, 20, 30, 200, 100, 0]).unwrap();
    let map = Grid::new(1, 2, vec![0.0, 1.0]).unwrap();
    assert_eq!(render_overlay(&img, &map, 0.0).unwrap(), img);
    assert_eq!(render_overlay(&img, &map, 1.0).unwrap().data(), [0, 0, 255, 255, 0, 0]);
    let green = Grid::new(1, 2, vec![0.5; 2]).unwrap();
    assert_eq!(render_overlay(&img, &green, 1.0).unwrap().pixel(1, 0), [0, 255, 0]);

    let zero = PixelAttribution::new(Tensor::zeros(&[3, 2, 2]).unwrap(), Method::GuidedBackprop).unwrap();
    assert!(render_attribution(&zero).data().iter().all(|&v| v == 128));

    let mut v = vec![0.0; 12];
    v[4 + 3] = 2.0;
    v[1] = -1.0;
    let attr = PixelAttribution::new(Tensor::new(vec![3, 2, 2], v.clone()).unwrap(), Method::GuidedBackprop).unwrap();
    let out = render_attribution(&attr);
    assert_eq!(out.pixel(1, 1)[1], 255);
    assert_eq!(out.pixel(1, 0)[0], 64);
    let scaled = Tensor::new(vec![3, 2, 2], v.iter().map(|x| x * 7.5).collect()).unwrap();
    let scaled = PixelAttribution::new(scaled, Method::GuidedBackprop).unwrap();
    assert_eq!(render_attribution(&scaled), out);
}
