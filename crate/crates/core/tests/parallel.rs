use lumigs::exec::set_parallel;
use lumigs::img::Image;
use lumigs::render::{render_backward_2d, render_cloud, RenderConfig};
use lumigs::scene::{new_cloud_random, Aabb, Camera};

// One test per binary: the parallel switch is process-wide.
#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let bounds = Aabb {
        min: [-1.0, -1.0, -1.0],
        max: [1.0, 1.0, 1.0],
    };
    let cloud = new_cloud_random(300, bounds, 3).unwrap();
    let camera = Camera::look_at([0.3, -0.2, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 40, 24, 0.9).unwrap();
    let cfg = RenderConfig::default();
    let g = Image::filled(40, 24, [0.01, -0.02, 0.005]);

    let run = |parallel| {
        set_parallel(parallel);
        let out = render_cloud(&cloud, &camera, &cfg).unwrap();
        let grads = render_backward_2d(&out, &g, &g).unwrap();
        (out.image_in.data.clone(), out.image_out.data.clone(), grads)
    };
    let par = run(true);
    let seq = run(false);
    set_parallel(true);
    assert_eq!(par.0, seq.0);
    assert_eq!(par.1, seq.1);
    assert_eq!(par.2, seq.2);
}
