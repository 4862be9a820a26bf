import init, { Demo } from "./pkg/snerg_web_demo.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");
let demo = null;

function view() {
  return [Number($("azimuth").value), Number($("elevation").value), canvas.width, canvas.height];
}

function draw() {
  if (!demo) return;
  const start = performance.now();
  const rgba = demo.render(...view(), $("skip").checked);
  const ms = performance.now() - start;
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), canvas.width, canvas.height), 0, 0);
  $("render-out").value = `${ms.toFixed(1)} ms per frame`;
}

function requantize() {
  if (!demo) return;
  demo.set_bits(Number($("bits").value));
  const db = demo.psnr_vs_full(...view());
  $("bits-out").value = `${demo.bits} bits: ${Number.isFinite(db) ? db.toFixed(2) + " dB" : "identical"} vs 8-bit`;
  draw();
}

function bake() {
  $("bake-out").value = "baking...";
  // Let the status paint before the blocking bake.
  setTimeout(() => {
    try {
      const start = performance.now();
      demo?.free();
      demo = new Demo($("scene").value, Number($("res").value), Number($("block").value));
      const ms = performance.now() - start;
      $("bake-out").value =
        `${demo.occupied_blocks} of ${demo.total_blocks} blocks occupied, baked in ${ms.toFixed(0)} ms`;
      requantize();
    } catch (e) {
      demo = null;
      $("bake-out").value = String(e);
    }
  }, 0);
}

await init();
$("bake").addEventListener("click", bake);
for (const id of ["azimuth", "elevation", "skip"]) $(id).addEventListener("input", draw);
$("bits").addEventListener("input", requantize);
bake();
