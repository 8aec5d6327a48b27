/* tslint:disable */
/* eslint-disable */

/**
 * DDIM inference schedule as `[t, √ᾱ_t, σ_t]` triples, earliest timestep first.
 */
export function ddim_schedule(infer_steps: number, eta: number): Float64Array;

/**
 * Minimum-phase impulse response of one azimuth of the synthetic head (`4·bins` taps).
 */
export function impulse_response(head_width_cm: number, concha_depth_cm: number, right: boolean, azimuth_deg: number, bins: number): Float64Array;

/**
 * Horizontal-plane magnitude map of the synthetic head, `azimuths × bins` dB, row-major.
 */
export function magnitude_map(head_width_cm: number, concha_depth_cm: number, right: boolean, azimuths: number, bins: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly ddim_schedule: (a: number, b: number) => [number, number, number, number];
    readonly impulse_response: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly magnitude_map: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
