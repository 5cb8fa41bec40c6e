import init, { hotspotShares, grantFrequencies, pathologyFm } from "./pkg/fairmesh_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#4878a8", "#e0873a", "#5a9e5a", "#b04848"];

// groups: [{ label, values: [..] }], one colour per value index
function bars(canvas, groups, legend) {
  const ctx = canvas.getContext("2d");
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const max = Math.max(1e-12, ...groups.flatMap((g) => g.values));
  const pad = 24;
  const slot = (width - 2 * pad) / groups.length;
  const per = groups[0] ? groups[0].values.length : 1;
  const bw = Math.max(2, (slot * 0.8) / per);
  ctx.font = "12px system-ui";
  groups.forEach((g, i) => {
    const x0 = pad + i * slot + slot * 0.1;
    g.values.forEach((v, j) => {
      const h = ((height - 2 * pad) * v) / max;
      ctx.fillStyle = COLORS[j % COLORS.length];
      ctx.fillRect(x0 + j * bw, height - pad - h, bw - 1, h);
    });
    ctx.fillStyle = "#222";
    ctx.fillText(g.label, x0, height - 6);
  });
  (legend || []).forEach((name, j) => {
    ctx.fillStyle = COLORS[j % COLORS.length];
    ctx.fillRect(width - 150, 8 + j * 16, 10, 10);
    ctx.fillStyle = "#222";
    ctx.fillText(name, width - 134, 17 + j * 16);
  });
}

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.textContent = `error: ${e.message || e}`;
  }
}

function runHotspot() {
  const out = $("hs-out");
  guard(out, () => {
    const r = JSON.parse(hotspotShares(+$("hs-k").value, $("hs-arb").value, +$("hs-h").value, 1));
    bars($("hs-canvas"), r.shares.map((s, i) => ({ label: `P${i}`, values: [s] })));
    out.textContent =
      `${r.arbiter}: shares ${r.shares.map((s) => s.toFixed(4)).join(" ")}\n` +
      `max/min ${r.spread.toFixed(2)}`;
  });
}

function runGrants() {
  const out = $("gr-out");
  guard(out, () => {
    const w = Float64Array.from($("gr-w").value.split(",").map(Number));
    const r = JSON.parse(grantFrequencies(w, +$("gr-n").value, 1));
    bars(
      $("gr-canvas"),
      r.expected.map((e, i) => ({ label: `in ${i}`, values: [e, r.observed[i]] })),
      ["expected", "observed"],
    );
    out.textContent = r.observed
      .map((o, i) => `input ${i}: ${o.toFixed(5)} (expected ${r.expected[i].toFixed(5)})`)
      .join("\n");
  });
}

function runPathology() {
  const out = $("pa-out");
  guard(out, () => {
    const r = JSON.parse(
      pathologyFm(
        +$("pa-open").value,
        +$("pa-period").value,
        +$("pa-tau").value,
        +$("pa-h").value,
        1,
      ),
    );
    bars(
      $("pa-canvas"),
      r.map((s) => ({ label: s.scheduler, values: [s.fm_rfb, s.fm_cfb] })),
      ["FM by units sent", "FM by link time"],
    );
    out.textContent = r
      .map(
        (s) =>
          `${s.scheduler.padEnd(5)} FM sent ${s.fm_rfb.toFixed(1)}  FM held ${s.fm_cfb.toFixed(1)}  ` +
          `throughput A ${s.throughput[0].toFixed(3)} B ${s.throughput[1].toFixed(3)}  ` +
          `latency A ${s.latency[0].toFixed(0)} B ${s.latency[1].toFixed(0)}`,
      )
      .join("\n");
  });
}

await init();
$("hs-run").onclick = runHotspot;
$("gr-run").onclick = runGrants;
$("pa-run").onclick = runPathology;
runHotspot();
runGrants();
runPathology();
