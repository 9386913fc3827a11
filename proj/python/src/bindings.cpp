// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// Python bindings. Images cross the boundary as float64 numpy arrays shaped
// (height, width, 3); depth and alpha maps as (height, width).
//
#include <dgtr/aggregate.hpp>
#include <dgtr/data.hpp>
#include <dgtr/dist.hpp>
#include <dgtr/eval_bench.hpp>
#include <dgtr/init.hpp>
#include <dgtr/loss.hpp>
#include <dgtr/raster.hpp>
#include <dgtr/train.hpp>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

namespace py = pybind11;
using namespace dgtr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

template <int C>
py::array_t<double>
toNumpy(const Plane<C> &p) {
    std::vector<py::ssize_t> shape{p.height, p.width};
    if (C > 1) shape.push_back(C);
    py::array_t<double> out(shape);
    std::memcpy(out.mutable_data(), p.data.data(), p.data.size() * sizeof(double));
    return out;
}

template <int C>
Plane<C>
fromNumpy(const Array &a) {
    const bool ok = C == 1 ? a.ndim() == 2 : a.ndim() == 3 && a.shape(2) == C;
    if (!ok) throw ContractError(C == 1 ? "expected a (height, width) array" : "expected a (height, width, 3) array");
    Plane<C> p(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    std::memcpy(p.data.data(), a.data(), p.data.size() * sizeof(double));
    return p;
}

template <int C>
py::list
toNumpyList(const std::vector<Plane<C>> &planes) {
    py::list out;
    for (const auto &p : planes) out.append(toNumpy(p));
    return out;
}

py::bytes
toBytes(const Bytes &b) {
    return py::bytes(reinterpret_cast<const char *>(b.data()), b.size());
}

Bytes
fromBytes(const py::bytes &b) {
    const std::string s = b;
    return Bytes(s.begin(), s.end());
}

// One column per primitive attribute; shape (n, k).
template <typename Get>
py::array_t<double>
column(const GaussianModel &m, int k, Get get) {
    py::array_t<double> out({static_cast<py::ssize_t>(m.size()), static_cast<py::ssize_t>(k)});
    auto v = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < m.size(); ++i)
        for (int j = 0; j < k; ++j) v(i, j) = get(m[i], j);
    return out;
}

DeviceDataset
makeDataset(const std::vector<Camera> &cams, const std::vector<Array> &images, const std::vector<Array> &depths) {
    DeviceDataset ds;
    ds.cameras = cams;
    for (const auto &a : images) ds.images.push_back(fromNumpy<3>(a));
    for (const auto &a : depths) ds.depths.push_back(fromNumpy<1>(a));
    ds.validate();
    return ds;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Distributed sparse-view Gaussian reconstruction";

    auto contractError  = py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
    auto formatError    = py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
    auto transportError = py::register_exception<TransportError>(m, "TransportError", PyExc_ConnectionError);
    auto numericError   = py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    (void)contractError, (void)formatError, (void)transportError, (void)numericError;

    // --- core ---------------------------------------------------------------
    py::class_<Camera>(m, "Camera")
        .def(py::init<>())
        .def_readwrite("id", &Camera::id)
        .def_readwrite("fx", &Camera::fx)
        .def_readwrite("fy", &Camera::fy)
        .def_readwrite("cx", &Camera::cx)
        .def_readwrite("cy", &Camera::cy)
        .def_readwrite("width", &Camera::width)
        .def_readwrite("height", &Camera::height)
        .def_readwrite("rotation", &Camera::rotation)
        .def_readwrite("translation", &Camera::translation)
        .def_readwrite("near", &Camera::near)
        .def_readwrite("far", &Camera::far)
        .def("pose", &Camera::pose)
        .def("set_pose", &Camera::setPose)
        .def("validate", &Camera::validate)
        .def("__repr__", [](const Camera &c) {
            return "<Camera id=" + std::to_string(c.id) + " " + std::to_string(c.width) + "x" +
                   std::to_string(c.height) + ">";
        });

    py::class_<Region>(m, "Region")
        .def(py::init<>())
        .def(py::init([](double x0, double x1, double y0, double y1, int device) {
                 return Region{x0, x1, y0, y1, device};
             }),
             py::arg("min_x"), py::arg("max_x"), py::arg("min_y"), py::arg("max_y"), py::arg("device"))
        .def_readwrite("min_x", &Region::min_x)
        .def_readwrite("max_x", &Region::max_x)
        .def_readwrite("min_y", &Region::min_y)
        .def_readwrite("max_y", &Region::max_y)
        .def_readwrite("device", &Region::device)
        .def("contains", [](const Region &r, const Vec3 &p) { return pointInRegion(p, r); });

    py::class_<GaussianPrimitive>(m, "GaussianPrimitive")
        .def(py::init<>())
        .def_readwrite("position", &GaussianPrimitive::position)
        .def_readwrite("rotation", &GaussianPrimitive::rotation)
        .def_readwrite("log_scale", &GaussianPrimitive::log_scale)
        .def_readwrite("opacity_logit", &GaussianPrimitive::opacity_logit)
        .def_readwrite("confidence", &GaussianPrimitive::confidence)
        .def_property_readonly("opacity", &GaussianPrimitive::opacity)
        .def_property_readonly("scale", &GaussianPrimitive::scale)
        .def("set_base_color", &GaussianPrimitive::setBaseColor);

    py::class_<GaussianModel>(m, "GaussianModel")
        .def(py::init<int>(), py::arg("sh_degree") = 1)
        .def_property_readonly("sh_degree", &GaussianModel::shDegree)
        .def("__len__", &GaussianModel::size)
        .def("__getitem__",
             [](const GaussianModel &g, std::size_t i) {
                 if (i >= g.size()) throw py::index_error();
                 return g[i];
             })
        .def("__setitem__",
             [](GaussianModel &g, std::size_t i, const GaussianPrimitive &p) {
                 if (i >= g.size()) throw py::index_error();
                 g[i] = p;
             })
        .def("add", &GaussianModel::add)
        .def("append", &GaussianModel::append)
        .def("identical", &GaussianModel::identical)
        .def_property_readonly("positions",
                               [](const GaussianModel &g) { return column(g, 3, [](const auto &p, int j) { return p.position[j]; }); })
        .def_property_readonly("opacities",
                               [](const GaussianModel &g) { return column(g, 1, [](const auto &p, int) { return p.opacity(); }); })
        .def_property_readonly("scales",
                               [](const GaussianModel &g) { return column(g, 3, [](const auto &p, int j) { return p.scale()[j]; }); })
        .def_property_readonly("rotations",
                               [](const GaussianModel &g) { return column(g, 4, [](const auto &p, int j) { return p.rotation[j]; }); });

    // --- raster and loss ----------------------------------------------------
    m.def(
        "render",
        [](const GaussianModel &model, const Camera &cam, const Vec3 &background) {
            RenderOptions o;
            o.background = background;
            const auto out = render(model, cam, o);
            py::dict d;
            d["color"] = toNumpy(out.color);
            d["depth"] = toNumpy(out.depth);
            d["alpha"] = toNumpy(out.alpha);
            return d;
        },
        py::arg("model"), py::arg("camera"), py::arg("background") = Vec3::Zero(),
        "Renders color, expected depth and alpha.");

    m.def("psnr", [](const Array &a, const Array &b) { return psnr(fromNumpy<3>(a), fromNumpy<3>(b)); });
    m.def("ssim", [](const Array &a, const Array &b) { return ssim(fromNumpy<3>(a), fromNumpy<3>(b)); });
    m.def(
        "pearson_depth_loss",
        [](const Array &rendered, const Array &estimated) {
            return pearsonDepthLoss(fromNumpy<1>(rendered), fromNumpy<1>(estimated)).value;
        },
        py::arg("rendered"), py::arg("estimated"));

    // --- data -------------------------------------------------------------------
    py::class_<SynthParams>(m, "SynthParams")
        .def(py::init<>())
        .def_readwrite("n_gaussians", &SynthParams::n_gaussians)
        .def_readwrite("n_cameras", &SynthParams::n_cameras)
        .def_readwrite("extent", &SynthParams::extent)
        .def_readwrite("width", &SynthParams::width)
        .def_readwrite("height", &SynthParams::height)
        .def_readwrite("sh_degree", &SynthParams::sh_degree)
        .def_readwrite("tilt_deg", &SynthParams::tilt_deg);

    py::class_<SyntheticScene>(m, "SyntheticScene")
        .def_readonly("seed", &SyntheticScene::seed)
        .def_readonly("params", &SyntheticScene::params)
        .def_readonly("gt", &SyntheticScene::gt)
        .def_readonly("cameras", &SyntheticScene::cameras)
        .def_readonly("test_cameras", &SyntheticScene::test_cameras)
        .def_property_readonly("images", [](const SyntheticScene &s) { return toNumpyList(s.images); })
        .def_property_readonly("depths", [](const SyntheticScene &s) { return toNumpyList(s.depths); })
        .def_property_readonly("test_images", [](const SyntheticScene &s) { return toNumpyList(s.test_images); })
        .def_property_readonly("extent", &SyntheticScene::extent);

    m.def("synth_scene", &synthScene, py::arg("seed"), py::arg("params") = SynthParams{});
    m.def("write_scene", &writeScene, py::arg("dir"), py::arg("scene"));
    m.def("load_scene", &loadScene, py::arg("dir"));
    m.def("partition_scene", [](const std::vector<Camera> &cams, int devices) { return partitionScene(cams, devices); },
          py::arg("cameras"), py::arg("devices"));
    m.def("region_of", [](const Vec3 &p, const std::vector<Region> &r) { return regionOf(p, r); });
    m.def(
        "estimate_depth", [](const Array &gt, std::uint64_t seed) { return toNumpy(estimateDepth(fromNumpy<1>(gt), seed)); },
        py::arg("depth"), py::arg("seed"));

    m.def("encode_model", [](const GaussianModel &g) { return toBytes(encodeModel(g)); });
    m.def("decode_model", [](const py::bytes &b) { return decodeModel(fromBytes(b)); });
    m.def("save_model", &saveModel, py::arg("path"), py::arg("model"));
    m.def("load_model", &loadModel, py::arg("path"));
    m.def("quantize_model", &quantizeModel);
    m.def("save_image", [](const std::filesystem::path &p, const Array &a) { saveImagePfm(p, fromNumpy<3>(a)); });
    m.def("load_image", [](const std::filesystem::path &p) { return toNumpy(loadImagePfm(p)); });
    m.def("save_depth", [](const std::filesystem::path &p, const Array &a) { saveDepthPfm(p, fromNumpy<1>(a)); });
    m.def("load_depth", [](const std::filesystem::path &p) { return toNumpy(loadDepthPfm(p)); });
    m.def("read_cameras", &readCamerasTxt);
    m.def("write_cameras", [](const std::filesystem::path &p, const std::vector<Camera> &c) { writeCamerasTxt(p, c); });

    // --- init and train ---------------------------------------------------------
    py::enum_<ScaleMode>(m, "ScaleMode")
        .value("NONE", ScaleMode::None)
        .value("GLOBAL", ScaleMode::Global)
        .value("GLOBAL_LOCAL", ScaleMode::GlobalLocal);

    m.def("random_init", &randomInit, py::arg("cameras"), py::arg("count"), py::arg("seed"), py::arg("sh_degree") = 1);
    m.def("icp_global_scale",
          [](const std::vector<Vec3> &src, const std::vector<Vec3> &tgt) { return icpGlobalScale(src, tgt); },
          py::arg("source"), py::arg("target"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("densify_interval", &TrainConfig::densify_interval)
        .def_readwrite("densify_stop_step", &TrainConfig::densify_stop_step)
        .def_readwrite("shape_freeze", &TrainConfig::shape_freeze)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_property(
            "lambda3", [](const TrainConfig &c) { return c.weights.lambda3; },
            [](TrainConfig &c, double v) { c.weights.lambda3 = v; });

    py::class_<TraceEntry>(m, "TraceEntry")
        .def_readonly("step", &TraceEntry::step)
        .def_readonly("view", &TraceEntry::view)
        .def_readonly("loss", &TraceEntry::loss)
        .def_readonly("l1", &TraceEntry::l1)
        .def_readonly("dssim", &TraceEntry::dssim)
        .def_readonly("depth", &TraceEntry::depth)
        .def_readonly("primitives", &TraceEntry::primitives);

    m.def(
        "train_device",
        [](const GaussianModel &init, const std::vector<Camera> &cams, const std::vector<Array> &images,
           const std::vector<Array> &depths, const TrainConfig &cfg) {
            const auto ds = makeDataset(cams, images, depths);
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = trainDevice(init, ds, cfg);
            }
            return py::make_tuple(r.model, r.trace);
        },
        py::arg("init"), py::arg("cameras"), py::arg("images"), py::arg("depths"), py::arg("config") = TrainConfig{},
        "Returns (model, trace).");

    // --- aggregate --------------------------------------------------------------
    m.def("filter_by_region", &filterByRegion);
    m.def("merge", [](const std::vector<GaussianModel> &models) { return merge(models); });

    // --- protocol ---------------------------------------------------------------
    m.def(
        "encode_frame",
        [](std::uint16_t type, const py::bytes &payload) { return toBytes(encodeFrame(WireMessage(type, fromBytes(payload)))); },
        py::arg("type"), py::arg("payload") = py::bytes());
    m.def("decode_frame", [](const py::bytes &b) {
        const auto msg = decodeFrame(fromBytes(b));
        return py::make_tuple(msg.type, toBytes(msg.payload));
    });

    // --- benchmark --------------------------------------------------------------
    py::class_<BenchmarkSpec>(m, "BenchmarkSpec")
        .def(py::init<>())
        .def_readwrite("seed", &BenchmarkSpec::seed)
        .def_readwrite("n_gaussians", &BenchmarkSpec::n_gaussians)
        .def_readwrite("n_cameras", &BenchmarkSpec::n_cameras)
        .def_readwrite("width", &BenchmarkSpec::width)
        .def_readwrite("height", &BenchmarkSpec::height)
        .def_readwrite("devices", &BenchmarkSpec::devices)
        .def_readwrite("tilt_deg", &BenchmarkSpec::tilt_deg);

    py::class_<Benchmark>(m, "Benchmark")
        .def_readonly("scene", &Benchmark::scene)
        .def_readonly("regions", &Benchmark::regions)
        .def_property_readonly("device_count", &Benchmark::deviceCount);

    m.def("make_benchmark", &makeBenchmark, py::arg("spec") = BenchmarkSpec{});
    m.def("load_benchmark", &loadBenchmark, py::arg("dir"));

    py::class_<EvalRow>(m, "EvalRow")
        .def_readonly("camera", &EvalRow::camera)
        .def_readonly("psnr", &EvalRow::psnr)
        .def_readonly("ssim", &EvalRow::ssim);

    m.def(
        "evaluate_views",
        [](const GaussianModel &model, const std::vector<Camera> &cams, const std::vector<Array> &images) {
            std::vector<ImageBuffer> imgs;
            for (const auto &a : images) imgs.push_back(fromNumpy<3>(a));
            return evaluateViews(model, cams, imgs);
        },
        py::arg("model"), py::arg("cameras"), py::arg("images"));

    py::class_<AblationOptions>(m, "AblationOptions")
        .def(py::init<>())
        .def_readwrite("steps", &AblationOptions::steps)
        .def_readwrite("align_steps", &AblationOptions::align_steps)
        .def_readwrite("devices", &AblationOptions::devices)
        .def_readwrite("seed", &AblationOptions::seed)
        .def_readwrite("lambda3", &AblationOptions::lambda3);

    py::class_<AblationRow>(m, "AblationRow")
        .def_readonly("label", &AblationRow::label)
        .def_readonly("first", &AblationRow::first)
        .def_readonly("second", &AblationRow::second)
        .def_readonly("psnr", &AblationRow::psnr);

    m.def("run_ablation_scale", &runAblationScale, py::arg("bench"), py::arg("options") = AblationOptions{},
          py::call_guard<py::gil_scoped_release>());
    m.def("run_ablation_depth", &runAblationDepth, py::arg("bench"), py::arg("options") = AblationOptions{},
          py::call_guard<py::gil_scoped_release>());
}
