import init, { shrinkage_curve, dirichlet_labels, memory_histograms } from "./pkg/tta_web.js";

const $ = (id) => document.getElementById(id);
const errorBox = $("error");

function guard(fn) {
  return () => {
    try {
      errorBox.textContent = "";
      fn();
    } catch (e) {
      errorBox.textContent = String(e.message ?? e);
    }
  };
}

function classColor(c, classes) {
  return `hsl(${Math.round((360 * c) / classes)}, 65%, 50%)`;
}

function drawCurve() {
  const alpha = $("alpha-inf").checked ? Infinity : Number($("alpha").value);
  $("alpha-val").textContent = $("alpha-inf").checked ? "inf" : $("alpha").value;
  const len = Number($("len").value);
  const range = 3;
  const data = shrinkage_curve(alpha, len, range, 301);
  const canvas = $("curve");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const sx = (x) => ((x + range) / (2 * range)) * (w - 40) + 20;
  const sy = (y) => h - 20 - ((y + range) / (2 * range + 1)) * (h - 40);

  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(sx(-range), sy(0));
  ctx.lineTo(sx(range), sy(0));
  ctx.moveTo(sx(0), sy(-range));
  ctx.lineTo(sx(0), sy(range + 1));
  ctx.stroke();

  ctx.strokeStyle = "#999";
  ctx.setLineDash([2, 4]);
  ctx.beginPath();
  ctx.moveTo(sx(-range), sy(-range));
  ctx.lineTo(sx(range), sy(range));
  ctx.stroke();

  const series = [
    { offset: 1, color: "#1565c0", dash: [] },
    { offset: 2, color: "#c62828", dash: [6, 4] },
  ];
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dash);
    ctx.lineWidth = 2;
    ctx.beginPath();
    for (let i = 0; i < data.length; i += 3) {
      const x = sx(data[i]);
      const y = sy(data[i + s.offset]);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    }
    ctx.stroke();
  }
  ctx.setLineDash([]);
  ctx.lineWidth = 1;
}

function streamParams() {
  return {
    delta: Number($("delta").value),
    classes: Number($("classes").value),
    perClass: Number($("per-class").value),
    seed: Number($("seed").value) >>> 0,
  };
}

function drawStrip() {
  const p = streamParams();
  const labels = dirichlet_labels(p.delta, p.classes, p.perClass, p.seed);
  const canvas = $("strip");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const step = canvas.width / labels.length;
  labels.forEach((y, i) => {
    ctx.fillStyle = classColor(y, p.classes);
    ctx.fillRect(i * step, 0, Math.max(step, 1), canvas.height);
  });
}

function drawHistogram() {
  const p = streamParams();
  const capacity = Number($("capacity").value);
  const counts = memory_histograms(p.delta, p.classes, p.perClass, capacity, p.seed);
  const canvas = $("hist");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const max = Math.max(1, ...counts);
  const group = (w - 40) / p.classes;
  const bar = group * 0.35;
  ctx.font = "12px system-ui";
  for (let c = 0; c < p.classes; c++) {
    const x0 = 20 + c * group + group * 0.15;
    [["#2e7d32", counts[c]], ["#ef6c00", counts[p.classes + c]]].forEach(([color, n], k) => {
      const bh = (n / max) * (h - 50);
      ctx.fillStyle = color;
      ctx.fillRect(x0 + k * bar, h - 25 - bh, bar - 2, bh);
    });
    ctx.fillStyle = classColor(c, p.classes);
    ctx.fillText(String(c), x0 + bar - 4, h - 8);
  }
}

const redrawStream = guard(() => {
  drawStrip();
  drawHistogram();
});

await init();
const redrawCurve = guard(drawCurve);
for (const id of ["alpha", "alpha-inf", "len"]) $(id).addEventListener("input", redrawCurve);
for (const id of ["delta", "classes", "per-class", "seed", "capacity"]) $(id).addEventListener("input", redrawStream);
redrawCurve();
redrawStream();
