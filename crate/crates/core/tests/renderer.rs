use std::time::Instant;

use image::{Rgb, RgbImage};
use talkhead::geometry::{standard_template, LandmarkSequence, CANONICAL_FPS};
use talkhead::renderer::{
    inside_hull, render_animation, sample_bilinear, to_pixel_space, triangulate, warp_frame, PixelMapping, PortraitImage,
    TriangleMesh,
};
use talkhead::Error;

fn checkerboard(size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| if (x / 7 + y / 5) % 2 == 0 { Rgb([230, 40, 90]) } else { Rgb([20, 200, 160]) })
}

fn smooth(size: u32) -> RgbImage {
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let c = |f: f64| (127.5 + 100.0 * f).round() as u8;
        Rgb([c((3.0 * u).sin()), c((2.0 * v + u).cos()), c((4.0 * u * v).sin())])
    })
}

fn face_mesh(size: u32) -> (PortraitImage, TriangleMesh) {
    let p = PortraitImage::synthetic(size, &standard_template()).unwrap();
    let mesh = triangulate(&p.mesh_vertices()).unwrap();
    (p, mesh)
}

#[test]
fn integer_shift_moves_hull_content_exactly() {
    let (_, mesh) = face_mesh(128);
    let src = checkerboard(128);
    let (dx, dy) = (5.0, -3.0);
    let target: Vec<[f64; 2]> = mesh.vertices.iter().map(|v| [v[0] + dx, v[1] + dy]).collect();
    let out = warp_frame(&src, &mesh, &target).unwrap();
    let shifted = TriangleMesh { vertices: target, triangles: mesh.triangles.clone() };
    let mut checked = 0;
    for y in 0..128u32 {
        for x in 0..128u32 {
            let (sx, sy) = (x as f64 - dx, y as f64 - dy);
            if !inside_hull(&shifted, x as f64, y as f64) || sx < 0.0 || sy < 0.0 || sx > 127.0 || sy > 127.0 {
                continue;
            }
            assert_eq!(out.image.get_pixel(x, y), src.get_pixel(sx as u32, sy as u32), "pixel ({x}, {y})");
            checked += 1;
        }
    }
    assert!(checked > 10_000);
    assert_eq!(out.fold_overs, 0);
}

#[test]
fn global_affine_matches_direct_resampling() {
    let (_, mesh) = face_mesh(128);
    let src = smooth(128);
    let (a, b, c, d) = (0.9, 0.12, -0.08, 1.05);
    let (ox, oy) = (4.0, -2.5);
    let target: Vec<[f64; 2]> = mesh.vertices.iter().map(|v| [a * v[0] + b * v[1] + ox, c * v[0] + d * v[1] + oy]).collect();
    let out = warp_frame(&src, &mesh, &target).unwrap();
    let det = a * d - b * c;
    let moved = TriangleMesh { vertices: target, triangles: mesh.triangles.clone() };
    let mut worst = 0i32;
    for y in 0..128u32 {
        for x in 0..128u32 {
            if !inside_hull(&moved, x as f64, y as f64) {
                continue;
            }
            let (u, v) = (x as f64 - ox, y as f64 - oy);
            let (sx, sy) = ((d * u - b * v) / det, (-c * u + a * v) / det);
            let want = sample_bilinear(&src, sx, sy).map(|c| c.round().clamp(0.0, 255.0) as i32);
            let got = out.image.get_pixel(x, y).0;
            for k in 0..3 {
                worst = worst.max((got[k] as i32 - want[k]).abs());
            }
        }
    }
    assert!(worst <= 2, "max channel error {worst}/255");
}

#[test]
fn constant_sequence_renders_identical_frames() {
    let template = standard_template();
    let p = PortraitImage::synthetic(96, &template).unwrap();
    let map = PixelMapping::fit(&template, &p.landmarks).unwrap();
    let seq = to_pixel_space(&LandmarkSequence::repeat(&template, 4, CANONICAL_FPS).unwrap(), &map).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = render_animation(&p, &seq, dir.path()).unwrap();
    assert_eq!(m.frame_count, 4);
    assert_eq!(m.frames[0], "frame_000000.png");
    let first = std::fs::read(dir.path().join(&m.frames[0])).unwrap();
    for f in &m.frames[1..] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), first);
    }
    assert!(dir.path().join("manifest.json").is_file());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let template = standard_template();
    let p = PortraitImage::synthetic(32, &template).unwrap();
    let seq = LandmarkSequence::repeat(&template, 1, CANONICAL_FPS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = render_animation(&p, &seq, blocker.join("frames")).unwrap_err();
    assert!(matches!(err, Error::Io(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}

fn warp_seconds(size: u32) -> f64 {
    let (p, mesh) = face_mesh(size);
    let s = size as f64 / 256.0;
    let target: Vec<[f64; 2]> = mesh.vertices.iter().map(|v| [v[0] + 3.0 * s, v[1] - 2.0 * s]).collect();
    (0..7)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(warp_frame(&p.image, &mesh, &target).unwrap());
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn render_time_is_linear_in_pixels() {
    warp_seconds(256);
    let small = warp_seconds(256) / (256.0 * 256.0);
    let large = warp_seconds(512) / (512.0 * 512.0);
    let ratio = large / small;
    assert!((0.7..=1.3).contains(&ratio), "time per pixel changed by {ratio:.2}x");
}
